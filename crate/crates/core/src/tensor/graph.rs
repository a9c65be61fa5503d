use super::{sigmoid, softplus, Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Gather(Var, Vec<usize>),
    SqDiff(Var, Var),
    PairwiseSqDist(Var, Var),
    ConcatRows(Var, Var),
    IndexRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations as they are evaluated, so adjoints can be
/// replayed in reverse. Values are computed eagerly.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints indexed by [`Var`]; `None` where no path to the output exists.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(op: &'static str, ts: &[&Tensor<T>]) -> TensorError
where
    T: Real,
{
    TensorError::Shape { op, shapes: ts.iter().map(|t| t.shape().to_vec()).collect() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose adjoint is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b), false)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b), true)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "multiply", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "squared_difference", |x, y| (x - y) * (x - y), Op::SqDiff(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "log_softmax")?;
        let out = self.value(a).log_softmax_rows();
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "softmax")?;
        let out = self.value(a).softmax_rows();
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums each row of a matrix, giving a vector of row totals.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        self.require_matrix(a, "row_sums")?;
        let t = self.value(a);
        let (r, _) = t.dims2();
        let out: Vec<T> = (0..r).map(|i| t.row(i).iter().copied().sum()).collect();
        Ok(self.push(Tensor::vector(out), Op::RowSums(a), &[a]))
    }

    /// Picks `a[i, idx[i]]` for every row.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if t.shape().len() != 2 || idx.len() != r {
            return Err(TensorError::Shape { op: "gather", shapes: vec![t.shape().to_vec(), vec![idx.len()]] });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index { op: "gather", index: bad, extent: c });
        }
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
        Ok(self.push(Tensor::vector(out), Op::Gather(a, idx.to_vec()), &[a]))
    }

    /// `out[i, j] = ||a_i - b_j||^2` for row sets `a` [r, d] and `b` [s, d].
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, d) = ta.dims2();
        let (s, d2) = tb.dims2();
        if ta.shape().len() != 2 || tb.shape().len() != 2 || d != d2 {
            return Err(shape_err("pairwise_squared_difference", &[ta, tb]));
        }
        let mut out = Vec::with_capacity(r * s);
        for i in 0..r {
            let ai = ta.row(i);
            for j in 0..s {
                out.push(ai.iter().zip(tb.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::new(vec![r, s], out)?;
        Ok(self.push(out, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2();
        let (rb, cb) = tb.dims2();
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ca != cb {
            return Err(shape_err("concat_rows", &[ta, tb]));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Builds a matrix from rows of `a` in the order given by `idx`.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if t.shape().len() != 2 || idx.is_empty() {
            return Err(TensorError::Shape { op: "index_rows", shapes: vec![t.shape().to_vec(), vec![idx.len()]] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index { op: "index_rows", index: bad, extent: r });
        }
        let data: Vec<T> = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::IndexRows(a, idx.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    fn require_matrix(&self, a: Var, op: &'static str) -> Result<()> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err(op, &[t]));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `output`. Every recorded node that lies on
    /// a gradient path is visited once, in reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // leaves keep their adjoint; intermediates are dropped once used
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                if needs(a) {
                    // dA = G B^T  (or G B when b was transposed)
                    let ga = g.matmul(tb, !trans_b)?;
                    self.accumulate(grads, a, ga);
                }
                if needs(b) {
                    let gb = if trans_b { g.matmul_ex(true, ta, false)? } else { ta.matmul_ex(true, g, false)? };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, g.zip_map(val(b), "multiply", |x, y| x * y)?);
                }
                if needs(b) {
                    self.accumulate(grads, b, g.zip_map(val(a), "multiply", |x, y| x * y)?);
                }
            }
            &Op::SqDiff(a, b) => {
                let d = val(a).zip_map(val(b), "squared_difference", |x, y| x - y)?;
                let two = T::lit(2.0);
                let ga = d.zip_map(g, "squared_difference", |x, y| two * x * y)?;
                if needs(b) {
                    self.accumulate(grads, b, ga.map(|x| -x));
                }
                self.accumulate(grads, a, ga);
            }
            &Op::AddRow(a, bias) => {
                if needs(bias) {
                    let (r, c) = g.dims2();
                    let mut gb = vec![T::zero(); c];
                    for i in 0..r {
                        for (acc, &x) in gb.iter_mut().zip(g.row(i)) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::new(val(bias).shape().to_vec(), gb)?);
                }
                self.accumulate(grads, a, g.clone());
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Relu(a) => {
                let ga = g.zip_map(y, "relu", |gx, yx| if yx > T::zero() { gx } else { T::zero() })?;
                self.accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = g.zip_map(y, "tanh", |gx, yx| gx * (T::one() - yx * yx))?;
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.zip_map(y, "sigmoid", |gx, yx| gx * yx * (T::one() - yx))?;
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => self.accumulate(grads, a, g.zip_map(y, "exp", |gx, yx| gx * yx)?),
            &Op::Log(a) => self.accumulate(grads, a, g.zip_map(val(a), "log", |gx, x| gx / x)?),
            &Op::Softplus(a) => {
                self.accumulate(grads, a, g.zip_map(val(a), "softplus", |gx, x| gx * sigmoid(x))?)
            }
            &Op::LogSoftmax(a) => {
                let (r, c) = y.dims2();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let gs: T = g.row(i).iter().copied().sum();
                    for j in 0..c {
                        ga[i * c + j] = g.row(i)[j] - y.row(i)[j].exp() * gs;
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), ga)?);
            }
            &Op::Softmax(a) => {
                let (r, c) = y.dims2();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let dot: T = g.row(i).iter().zip(y.row(i)).map(|(&gx, &yx)| gx * yx).sum();
                    for j in 0..c {
                        ga[i * c + j] = y.row(i)[j] * (g.row(i)[j] - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), ga)?);
            }
            &Op::Sum(a) => {
                let ga = Tensor::full(val(a).shape(), g.item());
                self.accumulate(grads, a, ga);
            }
            &Op::Mean(a) => {
                let n = T::lit(val(a).len() as f64);
                let ga = Tensor::full(val(a).shape(), g.item() / n);
                self.accumulate(grads, a, ga);
            }
            &Op::RowSums(a) => {
                let (r, c) = val(a).dims2();
                let data: Vec<T> = (0..r).flat_map(|i| std::iter::repeat_n(g.data()[i], c)).collect();
                self.accumulate(grads, a, Tensor::new(val(a).shape().to_vec(), data)?);
            }
            Op::Gather(a, idx) => {
                let (_, c) = val(*a).dims2();
                let mut ga = Tensor::zeros(val(*a).shape());
                for (i, &j) in idx.iter().enumerate() {
                    ga.data_mut()[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let two = T::lit(2.0);
                // d/da_i = 2 * (sum_j g_ij) a_i - 2 * (G B)_i
                if needs(a) {
                    let mut ga = g.matmul(tb, false)?;
                    let (r, d) = ta.dims2();
                    for i in 0..r {
                        let gs: T = g.row(i).iter().copied().sum();
                        for k in 0..d {
                            let v = &mut ga.data_mut()[i * d + k];
                            *v = two * (gs * ta.row(i)[k] - *v);
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if needs(b) {
                    let mut gb = g.matmul_ex(true, ta, false)?;
                    let (r, _) = ta.dims2();
                    let (s, d) = tb.dims2();
                    for j in 0..s {
                        let gs: T = (0..r).map(|i| g.data()[i * s + j]).sum();
                        for k in 0..d {
                            let v = &mut gb.data_mut()[j * d + k];
                            *v = two * (gs * tb.row(j)[k] - *v);
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = val(a).len();
                let ga = Tensor::new(val(a).shape().to_vec(), g.data()[..split].to_vec())?;
                let gb = Tensor::new(val(b).shape().to_vec(), g.data()[split..].to_vec())?;
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::IndexRows(a, idx) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                for (out_row, &src) in idx.iter().enumerate() {
                    for (acc, &x) in ga.row_mut(src).iter_mut().zip(g.row(out_row)) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::Reshape(a) => {
                let ga = g.clone().reshape(val(a).shape())?;
                self.accumulate(grads, a, ga);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::matrix(1, 4, logits.clone()).unwrap());
        // logsumexp = x_0 - log_softmax(x)_0
        let ls = g.log_softmax(x).unwrap();
        let first = g.gather(ls, &[0]).unwrap();
        let x0 = g.gather(x, &[0]).unwrap();
        let lse = g.sub(x0, first).unwrap();
        let lse = g.sum(lse);
        let grads = g.backward(lse).unwrap();
        let expect = Tensor::matrix(1, 4, logits).unwrap().softmax_rows();
        for (a, b) in grads.get(x).unwrap().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.backward(y).unwrap_err(), TensorError::NonScalar(vec![2]));
    }

    #[test]
    fn constant_output_has_no_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.mul(c, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn gather_checks_index_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.gather(x, &[0, 3]), Err(TensorError::Index { op: "gather", .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x + x) => dy/dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, -4.0]));
        let s = g.add(x, x).unwrap();
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
