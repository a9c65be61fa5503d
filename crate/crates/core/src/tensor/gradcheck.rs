use super::{Graph, Result, Tensor, Var};

/// Compares reverse-mode adjoints of the scalar built by `f` against central
/// differences with the given `step`, returning the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every parameter entry.
pub fn check_gradients<F>(params: &[Tensor<f64>], f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            probe[pi].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_five_variables() {
        // f(x) = sum_i a_i x_i^2 + x_0 x_1
        let x = Tensor::vector(vec![0.3, -1.1, 2.0, 0.7, -0.4]);
        let err = check_gradients(
            &[x],
            |g, v| {
                let a = g.constant(Tensor::vector(vec![1.0, 2.0, 0.5, 3.0, 1.5]));
                let sq = g.mul(v[0], v[0])?;
                let w = g.mul(a, sq)?;
                let s = g.sum(w);
                let x2 = g.reshape(v[0], &[5, 1])?;
                let outer = g.matmul_t(x2, x2)?;
                let cross = g.index_rows(outer, &[0])?;
                let cross = g.gather(cross, &[1])?;
                let cross = g.sum(cross);
                g.add(s, cross)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn dead_branch_has_exactly_zero_gradient() {
        let x = Tensor::vector(vec![0.5, -0.25]);
        let y = Tensor::vector(vec![1.5, 2.0]);
        let mut g = Graph::new();
        let vx = g.param(x);
        let vy = g.param(y);
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let dead = g.tanh(vy);
        let dead = g.mul(dead, zero).unwrap();
        let live = g.mul(vx, vx).unwrap();
        let total = g.add(live, dead).unwrap();
        let out = g.sum(total);
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(vy).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(vx).unwrap().data(), &[1.0, -0.5]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let a = Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let b = Tensor::matrix(2, 4, (0..8).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect()).unwrap();
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]);
        let pos = Tensor::matrix(3, 4, (0..12).map(|i| 0.2 + i as f64 / 10.0).collect()).unwrap();
        let err = check_gradients(
            &[a, b, bias, pos],
            |g, v| {
                let (a, b, bias, pos) = (v[0], v[1], v[2], v[3]);
                let ab = g.matmul_t(a, b)?; // [3,2]
                let bt = g.matmul_t(b, a)?; // [2,3]
                let abt = g.matmul(ab, bt)?; // [3,3]
                let sm = g.softmax(abt)?;
                let ls = g.log_softmax(ab)?;
                let d = g.pairwise_sq_dist(a, b)?;
                let bsq = g.sq_diff(a, pos)?;
                let r = g.add_row(a, bias)?;
                let r = g.relu(r);
                let t = g.tanh(a);
                let s = g.sigmoid(a);
                let sp = g.softplus(a);
                let l = g.log(pos);
                let e = g.exp(a);
                let c = g.concat_rows(a, b)?;
                let ix = g.index_rows(c, &[4, 0, 0, 2])?;
                let gath = g.gather(ls, &[1, 0, 1])?;
                let rs = g.row_sums(d)?;
                let mut terms = Vec::new();
                for v in [sm, ls, d, bsq, r, t, s, sp, l, e, ix] {
                    let w = g.scale(v, 0.37);
                    let w = g.add_scalar(w, 0.1);
                    let w = g.mul(w, v)?;
                    terms.push(g.mean(w));
                }
                terms.push(g.sum(gath));
                terms.push(g.sum(rs));
                let sub = g.sub(t, s)?;
                terms.push(g.sum(sub));
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t)?;
                }
                Ok(acc)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
