/// One layer of a model description, for exact parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Gru { input: usize, hidden: usize },
    Embedding { codes: usize, dim: usize },
}

impl LayerSpec {
    pub fn count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::Gru { input, hidden } => 3 * (hidden * input + hidden * hidden + hidden),
            LayerSpec::Embedding { codes, dim } => codes * dim,
        }
    }
}

pub fn param_count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_4_to_3_with_bias() {
        assert_eq!(param_count(&[LayerSpec::Dense { input: 4, output: 3 }]), 15);
    }

    #[test]
    fn gru_formula() {
        assert_eq!(param_count(&[LayerSpec::Gru { input: 2, hidden: 3 }]), 54);
    }

    #[test]
    fn gru_count_matches_allocated_params() {
        let p = crate::nn::layers::GruLayerParams::zeros(5, 7);
        assert_eq!(p.param_count(), param_count(&[LayerSpec::Gru { input: 5, hidden: 7 }]));
    }
}
