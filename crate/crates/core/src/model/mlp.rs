use rand::Rng;

use crate::tensor::{Graph, Real, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// Fully connected network, ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect::<Vec<T>>();
                let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("weight");
                let bias = Tensor::vector(draw(fan_out));
                Linear { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").weight.shape()[1]
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight, false)?.add_row(&layer.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Same computation recorded on `g`; `params` holds `(weight, bias)` vars
    /// per layer, flattened.
    pub fn forward_graph(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = g.matmul(h, params[2 * i])?;
            h = g.add_row(h, params[2 * i + 1])?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(|l| Linear { weight: l.weight.cast(), bias: l.bias.cast() }).collect(),
        }
    }
}
