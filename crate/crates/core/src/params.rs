use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Anything that owns trainable tensors, visited in a fixed canonical order.
///
/// The order defines checkpoint layout and optimizer state alignment, so
/// implementations must visit the same tensors in the same sequence every
/// time.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    /// Adds the tape's gradients into every bound parameter. Parameters the
    /// forward pass never touched are left alone.
    fn accumulate_grads(&mut self, grads: &Gradients) {
        self.visit_mut("", &mut |_, t| {
            if grads.is_bound(t) {
                grads
                    .accumulate_into(t)
                    .expect("bound leaf has matching shape");
            }
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| {
            names.push(name.trim_start_matches('.').to_string())
        });
        names
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(item) = self {
            item.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(item) = self {
            item.visit_mut(prefix, f);
        }
    }
}
