//! Central finite-difference gradient checking.
//!
//! The checker drives the function under test as a black box: it only
//! compares backward-pass gradients against `(f(x+h) − f(x−h)) / 2h`.

use crate::error::Result;
use crate::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_per_input: Option<usize>,
    pub training: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, floor: 1e-3, max_per_input: None, training: true }
    }
}

fn projection(i: usize) -> f64 {
    (1.3 * i as f64 + 0.7).sin()
}

/// Scalar objective: the output of `f` contracted with fixed weights.
fn objective<F>(g: &mut Graph<f64>, inputs: &[Var], f: &F) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, inputs)?;
    let shape = g.shape(out).to_vec();
    let n = g.data(out).len();
    let w = g.input(Tensor::new(shape, (0..n).map(projection).collect())?);
    let weighted = g.mul(out, w)?;
    let mean = g.mean(weighted, None)?;
    g.scale(mean, n as f64)
}

fn evaluate<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(cfg.training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = objective(&mut g, &vars, f)?;
    Ok(g.data(loss)[0])
}

/// Compares analytic and numeric gradients of `f` with respect to every
/// input. `f` must be deterministic (re-seed any RNG inside it).
pub fn gradcheck<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(cfg.training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = objective(&mut g, &vars, &f)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = cfg.max_per_input.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for e in (0..n).step_by(stride) {
            let orig = t.data()[e];
            probe[ti].data_mut()[e] = orig + cfg.step;
            let up = evaluate(&probe, &cfg, &f)?;
            probe[ti].data_mut()[e] = orig - cfg.step;
            let down = evaluate(&probe, &cfg, &f)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[ti][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One named operator check from [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    Tensor::uniform(shape, 1.0, &mut rand::rngs::StdRng::seed_from_u64(seed))
}

/// Values bounded away from zero so ReLU kinks are never straddled by ±h.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = seeded(shape, seed);
    let data = t.data().iter().map(|&v| if v < 0.0 { v.min(-0.1) } else { v.max(0.1) }).collect();
    Tensor::new(shape.to_vec(), data).expect("same shape")
}

/// Every differentiable operator on small inputs, with default settings
/// unless a case needs otherwise.
pub fn op_suite() -> Result<Vec<OpCheck>> {
    use crate::{Reduction, RunningStats};
    use rand::SeedableRng;

    type Case = (&'static str, Vec<Tensor<f64>>, GradCheckConfig, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);
    let d = GradCheckConfig::default();
    let stats_mean = [0.1, -0.2, 0.0];
    let stats_var = [1.5, 0.5, 2.0];
    // batch 2, 3 queries, 4 keys, width 4, 2 heads, padding on the second row
    let mask: Vec<bool> = (0..2 * 3 * 4).map(|i| !(i % 4 == 3 && i >= 12)).collect();
    // distinct, well-separated values so the arg-max never flips under ±h
    let pool_in = Tensor::new(vec![1, 1, 5], vec![0.3, -0.8, 0.9, 0.1, -0.4])?;

    let cases: Vec<Case> = vec![
        ("matmul", vec![seeded(&[5, 3], 1), seeded(&[3, 4], 2)], d, Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", vec![seeded(&[2, 3, 5], 3), seeded(&[5, 2], 4)], d, Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![seeded(&[5], 1), seeded(&[5], 2)], d, Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_bias", vec![seeded(&[3, 5], 1), seeded(&[5], 2)], d, Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![seeded(&[5], 3), seeded(&[5], 4)], d, Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul_bias", vec![seeded(&[2, 5], 3), seeded(&[5], 4)], d, Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul_self", vec![seeded(&[5], 5)], d, Box::new(|g, v| g.mul(v[0], v[0]))),
        ("relu", vec![away_from_zero(&[5], 6)], d, Box::new(|g, v| g.relu(v[0]))),
        ("scale", vec![seeded(&[5], 7)], d, Box::new(|g, v| g.scale(v[0], -2.5))),
        ("dropout", vec![seeded(&[5], 8)], d, Box::new(|g, v| g.dropout(v[0], 0.4, &mut rand::rngs::StdRng::seed_from_u64(11)))),
        ("reshape", vec![seeded(&[2, 3], 9)], d, Box::new(|g, v| g.reshape(v[0], &[3, 2]))),
        ("transpose", vec![seeded(&[2, 3, 4], 10)], d, Box::new(|g, v| g.transpose(v[0], 1, 2))),
        ("concat", vec![seeded(&[2, 3], 11), seeded(&[2, 2], 12)], d, Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 1))),
        ("slice", vec![seeded(&[3, 5], 13)], d, Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        ("mean_all", vec![seeded(&[5], 14)], d, Box::new(|g, v| g.mean(v[0], None))),
        ("mean_axis", vec![seeded(&[2, 3, 4], 15)], d, Box::new(|g, v| g.mean(v[0], Some(1)))),
        ("softmax", vec![seeded(&[5], 16)], d, Box::new(|g, v| g.softmax(v[0], 0))),
        ("softmax_axis0", vec![seeded(&[3, 4], 17)], d, Box::new(|g, v| g.softmax(v[0], 0))),
        ("log_softmax", vec![seeded(&[2, 5], 18)], d, Box::new(|g, v| g.log_softmax(v[0], 1))),
        ("embedding_lookup", vec![seeded(&[5, 3], 19)], d, Box::new(|g, v| g.embedding_lookup(v[0], &[4, 0, 4, 2]))),
        ("cross_entropy_mean", vec![seeded(&[4, 5], 20)], d, Box::new(|g, v| g.cross_entropy(v[0], &[1, 99, 4, 0], 99, Reduction::Mean))),
        ("cross_entropy_sum", vec![seeded(&[3, 5], 21)], d, Box::new(|g, v| g.cross_entropy(v[0], &[2, 2, 3], 99, Reduction::Sum))),
        ("conv1d", vec![seeded(&[2, 3, 11], 22), seeded(&[4, 3, 3], 23), seeded(&[4], 24)], d, Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2))),
        ("maxpool1d", vec![pool_in], d, Box::new(|g, v| g.maxpool1d(v[0], 2))),
        (
            "batchnorm1d_train",
            vec![seeded(&[2, 3, 5], 25), seeded(&[3], 26), seeded(&[3], 27)],
            d,
            Box::new(move |g, v| Ok(g.batchnorm1d(v[0], v[1], v[2], RunningStats { mean: &stats_mean, var: &stats_var })?.0)),
        ),
        (
            "batchnorm1d_eval",
            vec![seeded(&[4, 3], 28), seeded(&[3], 29), seeded(&[3], 30)],
            GradCheckConfig { training: false, ..d },
            Box::new(move |g, v| Ok(g.batchnorm1d(v[0], v[1], v[2], RunningStats { mean: &stats_mean, var: &stats_var })?.0)),
        ),
        ("layernorm", vec![seeded(&[3, 5], 31), seeded(&[5], 32), seeded(&[5], 33)], d, Box::new(|g, v| g.layernorm(v[0], v[1], v[2]))),
        (
            "multi_head_attention",
            vec![seeded(&[6, 4], 34), seeded(&[8, 4], 35), seeded(&[8, 4], 36)],
            d,
            Box::new(move |g, v| g.multi_head_attention(v[0], v[1], v[2], 2, 2, Some(&mask))),
        ),
        ("self_attention_shared_input", vec![seeded(&[5, 4], 37)], d, Box::new(|g, v| g.multi_head_attention(v[0], v[0], v[0], 2, 1, None))),
    ];
    cases.into_iter().map(|(name, inputs, cfg, f)| Ok(OpCheck { name, report: gradcheck(&inputs, cfg, f)? })).collect()
}
