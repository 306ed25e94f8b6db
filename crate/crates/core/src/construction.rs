//! A one-layer linear-attention transformer that executes a linear
//! hypernetwork `x, z ↦ A σ((Σ_m z_m θ_m) x)` exactly.
//!
//! Two tokens share a residual stream split into four slices: input `x`,
//! latent `z`, hidden units and outputs. The first token carries `x` and a
//! block of ones; the second carries `z`. One head per module moves
//! `z_m θ_m x` from the first token into the hidden slice of the second, and
//! the MLP applies the nonlinearity and readout there.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{gelu, matmul};
use crate::autodiff::Tensor;
use crate::taskgen::{
    init_teacher, opnorm, sample_latent, Episode, Mask, TaskLatent, TeacherDims, TeacherParams, INPUT_BOUND,
};
use crate::{rng, Error, Result};

/// Slice offsets of the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionLayout {
    pub input: usize,
    pub modules: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ConstructionLayout {
    pub fn new(dims: TeacherDims) -> Self {
        ConstructionLayout {
            input: dims.input,
            modules: dims.modules,
            hidden: dims.hidden,
            output: dims.output,
        }
    }

    pub fn d_model(&self) -> usize {
        self.input + self.modules + self.hidden + self.output
    }

    pub fn x_slice(&self) -> Range<usize> {
        0..self.input
    }

    pub fn z_slice(&self) -> Range<usize> {
        self.input..self.input + self.modules
    }

    pub fn hidden_slice(&self) -> Range<usize> {
        let s = self.input + self.modules;
        s..s + self.hidden
    }

    pub fn output_slice(&self) -> Range<usize> {
        let s = self.input + self.modules + self.hidden;
        s..s + self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `d_model × 1`
    pub query: Tensor,
    /// `d_model × 1`
    pub key: Tensor,
    /// `d_model × h`
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearBlockWeights {
    pub heads: Vec<HeadWeights>,
    /// `h × d_model`, shared by all heads.
    pub projection: Tensor,
    /// `d_model × h`
    pub mlp_in: Tensor,
    /// `h × d_model`
    pub mlp_out: Tensor,
}

impl LinearBlockWeights {
    pub fn zeros(d_model: usize, heads: usize, value_dim: usize, mlp_dim: usize) -> Self {
        LinearBlockWeights {
            heads: (0..heads)
                .map(|_| HeadWeights {
                    query: Tensor::zeros(&[d_model, 1]),
                    key: Tensor::zeros(&[d_model, 1]),
                    value: Tensor::zeros(&[d_model, value_dim]),
                })
                .collect(),
            projection: Tensor::zeros(&[value_dim, d_model]),
            mlp_in: Tensor::zeros(&[d_model, mlp_dim]),
            mlp_out: Tensor::zeros(&[mlp_dim, d_model]),
        }
    }
}

fn mismatch(op: &'static str, want: usize, got: usize) -> Error {
    Error::Dimension {
        op,
        lhs: vec![want],
        rhs: vec![got],
    }
}

/// `2 × d_model` tokens `e₁ = (x, 0, 1)` and `e₂ = (0, z, 0)`.
pub fn embed_tokens(x: &[f64], z: &[f64], layout: &ConstructionLayout) -> Result<Tensor> {
    if x.len() != layout.input {
        return Err(mismatch("embed_tokens x", layout.input, x.len()));
    }
    if z.len() != layout.modules {
        return Err(mismatch("embed_tokens z", layout.modules, z.len()));
    }
    let dm = layout.d_model();
    let mut e = Tensor::zeros(&[2, dm]);
    let data = e.data_mut();
    data[layout.x_slice()].copy_from_slice(x);
    let ones = layout.input + layout.modules;
    data[ones..dm].iter_mut().for_each(|v| *v = 1.0);
    data[dm + layout.input..dm + layout.input + layout.modules].copy_from_slice(z);
    Ok(e)
}

/// Compiles modules `θ_m` (each `h × d`) and readout `A` (`o × h`) into block weights.
pub fn build_construction(
    modules: &[Tensor],
    readout: &Tensor,
    layout: &ConstructionLayout,
) -> Result<LinearBlockWeights> {
    let (d, m, h) = (layout.input, layout.modules, layout.hidden);
    if modules.len() != m {
        return Err(mismatch("build_construction modules", m, modules.len()));
    }
    for t in modules {
        if t.shape() != [h, d] {
            return Err(Error::Dimension {
                op: "build_construction module",
                lhs: vec![h, d],
                rhs: t.shape().to_vec(),
            });
        }
    }
    if readout.shape() != [layout.output, h] {
        return Err(Error::Dimension {
            op: "build_construction readout",
            lhs: vec![layout.output, h],
            rhs: readout.shape().to_vec(),
        });
    }
    let dm = layout.d_model();
    let mut w = LinearBlockWeights::zeros(dm, m, h, h);
    for (idx, (head, theta)) in w.heads.iter_mut().zip(modules).enumerate() {
        head.query.data_mut()[d + idx] = 1.0;
        head.key.data_mut()[d + m] = 1.0;
        let v = head.value.data_mut();
        for i in 0..d {
            for j in 0..h {
                v[i * h + j] = theta.at(&[j, i]);
            }
        }
    }
    let hidden = layout.hidden_slice();
    let out = layout.output_slice();
    for j in 0..h {
        w.projection.data_mut()[j * dm + hidden.start + j] = 1.0;
        w.mlp_in.data_mut()[(hidden.start + j) * h + j] = 1.0;
        for k in 0..layout.output {
            w.mlp_out.data_mut()[j * dm + out.start + k] = readout.at(&[k, j]);
        }
    }
    Ok(w)
}

/// `Σ_heads Q Kᵀ V W_P` for tokens `e` (`T × d_model`).
pub fn attention_update(weights: &LinearBlockWeights, e: &Tensor) -> Result<Tensor> {
    let (t, dm) = e.dims2()?;
    let mut total = Tensor::zeros(&[t, dm]);
    for head in &weights.heads {
        let q = matmul(e, &head.query)?;
        let k = matmul(e, &head.key)?;
        let v = matmul(e, &head.value)?;
        let scores = matmul(&q, &transpose(&k))?;
        let update = matmul(&matmul(&scores, &v)?, &weights.projection)?;
        total
            .data_mut()
            .iter_mut()
            .zip(update.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

/// Linear attention with residual, then `E ← E + σ(E W₁) W₂`. No softmax, mask or normalisation.
pub fn linear_block_forward(weights: &LinearBlockWeights, e: &Tensor) -> Result<Tensor> {
    let mut out = e.clone();
    let att = attention_update(weights, e)?;
    out.data_mut().iter_mut().zip(att.data()).for_each(|(a, b)| *a += b);
    let mlp = matmul(&gelu(&matmul(&out, &weights.mlp_in)?), &weights.mlp_out)?;
    out.data_mut().iter_mut().zip(mlp.data()).for_each(|(a, b)| *a += b);
    Ok(out)
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("2-D");
    Tensor::from_fn(&[c, r], |i| t.at(&[i % r, i / r]))
}

/// Direct evaluation of `A σ((Σ_m z_m θ_m) x)` without operator-norm scaling.
pub fn hypernetwork_forward(modules: &[Tensor], readout: &Tensor, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let (h, d) = modules
        .first()
        .ok_or_else(|| Error::InvalidInput("no modules".into()))?
        .dims2()?;
    if z.len() != modules.len() || x.len() != d {
        return Err(Error::Dimension {
            op: "hypernetwork_forward",
            lhs: vec![modules.len(), d],
            rhs: vec![z.len(), x.len()],
        });
    }
    let mut w = Tensor::zeros(&[h, d]);
    for (zm, theta) in z.iter().zip(modules) {
        w.data_mut()
            .iter_mut()
            .zip(theta.data())
            .for_each(|(a, b)| *a += zm * b);
    }
    let pre = matmul(&w, &Tensor::new(vec![d, 1], x.to_vec())?)?;
    let hidden = gelu(&pre);
    Ok(matmul(readout, &hidden)?.into_data())
}

/// Teacher compiled into block weights, plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstructedModel {
    pub layout: ConstructionLayout,
    pub weights: LinearBlockWeights,
}

impl ConstructedModel {
    pub fn from_teacher(teacher: &TeacherParams) -> Result<Self> {
        let layout = ConstructionLayout::new(teacher.dims);
        let weights = build_construction(&teacher.modules, &teacher.readout, &layout)?;
        Ok(ConstructedModel { layout, weights })
    }

    /// Both tokens after the block.
    pub fn run(&self, x: &[f64], z: &[f64]) -> Result<Tensor> {
        linear_block_forward(&self.weights, &embed_tokens(x, z, &self.layout)?)
    }

    /// Output slice of the second token.
    pub fn output(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let e = self.run(x, z)?;
        Ok(e.row(1)[self.layout.output_slice()].to_vec())
    }

    /// Second token's residual stream after `layer` blocks (0 or 1) for the query of `episode`.
    pub fn residual_stream(&self, episode: &Episode, layer: usize) -> Result<Vec<f64>> {
        let e = embed_tokens(episode.query(), episode.latent.as_slice(), &self.layout)?;
        match layer {
            0 => Ok(e.row(1).to_vec()),
            1 => Ok(linear_block_forward(&self.weights, &e)?.row(1).to_vec()),
            _ => Err(Error::InvalidInput(format!(
                "construction has one block, asked for layer {layer}"
            ))),
        }
    }

    /// The teacher's label for the episode query: the latent is rescaled by the
    /// inverse operator norm of `W(z)`, which normalises the generated weights.
    pub fn predict_normalized(&self, teacher: &TeacherParams, episode: &Episode) -> Result<f64> {
        let norm = opnorm(&teacher.combine(&episode.latent)?)?;
        let z: Vec<f64> = episode.latent.as_slice().iter().map(|v| v / norm).collect();
        self.output(episode.query(), &z)?
            .first()
            .copied()
            .ok_or_else(|| Error::Contract("construction has no output unit".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub dims: TeacherDims,
    pub trials: usize,
    pub tolerance: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

/// Compares the compiled block with direct evaluation on random `(x, z)` pairs.
///
/// Inputs are uniform on the unit-variance box; latents follow the task sampler
/// for a uniformly drawn non-empty mask.
pub fn verify_construction(
    teacher: &TeacherParams,
    readout: &Tensor,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<ConstructionReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("verification needs at least one trial".into()));
    }
    let layout = ConstructionLayout {
        output: readout.shape().first().copied().unwrap_or(0),
        ..ConstructionLayout::new(teacher.dims)
    };
    let weights = build_construction(&teacher.modules, readout, &layout)?;
    let mut r = rng::rng(seed);
    let m = layout.modules;
    let mut max_err: f64 = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..layout.input)
            .map(|_| r.gen_range(-INPUT_BOUND..=INPUT_BOUND))
            .collect();
        let mask = loop {
            let bits: Vec<u8> = (0..m).map(|_| r.gen_range(0..=1u8)).collect();
            if bits.contains(&1) {
                break Mask::new(bits)?;
            }
        };
        let TaskLatent(z) = sample_latent(&mask, &mut r)?;
        let e = linear_block_forward(&weights, &embed_tokens(&x, &z, &layout)?)?;
        let got = &e.row(1)[layout.output_slice()];
        let want = hypernetwork_forward(&teacher.modules, readout, &z, &x)?;
        for (a, b) in got.iter().zip(&want) {
            max_err = max_err.max((a - b).abs());
        }
    }
    Ok(ConstructionReport {
        dims: TeacherDims {
            output: layout.output,
            ..teacher.dims
        },
        trials,
        tolerance: tol,
        max_abs_error: max_err,
        pass: max_err < tol,
    })
}

/// Draws a teacher of the given shape and verifies its construction.
pub fn verify_dims(dims: TeacherDims, trials: usize, tol: f64, seed: u64) -> Result<ConstructionReport> {
    let teacher = init_teacher(rng::derive_seed(seed, "construction-teacher"), dims)?;
    verify_construction(
        &teacher,
        &teacher.readout,
        trials,
        tol,
        rng::derive_seed(seed, "construction-trials"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(m: usize, d: usize, h: usize, o: usize) -> ConstructionLayout {
        ConstructionLayout {
            input: d,
            modules: m,
            hidden: h,
            output: o,
        }
    }

    #[test]
    fn zero_inputs_embed_to_ones_block() {
        let l = layout(3, 4, 5, 2);
        let e = embed_tokens(&[0.0; 4], &[0.0; 3], &l).unwrap();
        assert_eq!(&e.row(0)[..7], &[0.0; 7]);
        assert!(e.row(0)[7..].iter().all(|&v| v == 1.0));
        assert!(e.row(1).iter().all(|&v| v == 0.0));
        assert!(embed_tokens(&[0.0; 3], &[0.0; 3], &l).is_err());
    }

    #[test]
    fn slices_round_trip_and_partition() {
        let l = layout(3, 4, 5, 2);
        let x = [1.0, -2.0, 3.0, 0.5];
        let z = [0.25, 0.0, 0.75];
        let e = embed_tokens(&x, &z, &l).unwrap();
        assert_eq!(&e.row(0)[l.x_slice()], &x);
        assert_eq!(&e.row(1)[l.z_slice()], &z);
        let mut seen = vec![0; l.d_model()];
        for r in [l.x_slice(), l.z_slice(), l.hidden_slice(), l.output_slice()] {
            r.for_each(|i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_weights_leave_tokens_unchanged() {
        let l = layout(2, 3, 3, 1);
        let e = embed_tokens(&[0.3, -0.2, 0.9], &[0.5, 0.7], &l).unwrap();
        let w = LinearBlockWeights::zeros(l.d_model(), 2, 3, 3);
        assert_eq!(linear_block_forward(&w, &e).unwrap(), e);
    }

    #[test]
    fn hand_evaluated_single_head_attention() {
        // d_model 2, tokens (1, 2) and (3, 4); q reads coord 0, k coord 1, v = 2·coord 0, W_P = [1, 0].
        let w = LinearBlockWeights {
            heads: vec![HeadWeights {
                query: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
                key: Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(),
                value: Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap(),
            }],
            projection: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            mlp_in: Tensor::zeros(&[2, 1]),
            mlp_out: Tensor::zeros(&[1, 2]),
        };
        let e = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // q = (1, 3), k = (2, 4), v = (2, 6); QKᵀV = [[1·(2·2+4·6)], [3·(2·2+4·6)]] = [[28], [84]].
        let out = linear_block_forward(&w, &e).unwrap();
        assert_eq!(out.data(), &[29.0, 2.0, 87.0, 4.0]);
    }

    #[test]
    fn doubling_values_doubles_the_update() {
        let t = init_teacher(4, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        let e = embed_tokens(&[0.4; 16], &[0.5, 0.0, 0.75, 0.0, 0.0, 0.0], &c.layout).unwrap();
        let base = attention_update(&c.weights, &e).unwrap();
        let mut w2 = c.weights.clone();
        for h in &mut w2.heads {
            h.value.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let doubled = attention_update(&w2, &e).unwrap();
        assert!(base.data().iter().zip(doubled.data()).all(|(a, b)| 2.0 * a == *b));
    }

    #[test]
    fn hidden_slice_holds_combined_weights_times_input() {
        let t = init_teacher(5, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = [0.6, 0.0, 0.0, 0.9, 0.0, 0.0];
        let e = embed_tokens(&x, &z, &c.layout).unwrap();
        let after = {
            let mut a = e.clone();
            let u = attention_update(&c.weights, &e).unwrap();
            a.data_mut().iter_mut().zip(u.data()).for_each(|(p, q)| *p += q);
            a
        };
        let w = t.combine(&TaskLatent(z.to_vec())).unwrap();
        let wx = matmul(&w, &Tensor::new(vec![16, 1], x.clone()).unwrap()).unwrap();
        let row = after.row(1);
        assert_eq!(&row[c.layout.x_slice()], &[0.0; 16]);
        assert_eq!(&row[c.layout.z_slice()], &z);
        for (a, b) in row[c.layout.hidden_slice()].iter().zip(wx.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(row[c.layout.output_slice()][0], 0.0);
        assert_eq!(after.row(0), e.row(0));
    }

    #[test]
    fn zero_latent_and_zero_input_give_zero_output() {
        let t = init_teacher(6, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        assert_eq!(c.output(&[0.7; 16], &[0.0; 6]).unwrap(), vec![0.0]);
        assert_eq!(
            c.output(&[0.0; 16], &[0.5, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            vec![0.0]
        );
        let direct = hypernetwork_forward(&t.modules, &t.readout, &[0.5, 1.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 16]);
        assert_eq!(direct.unwrap(), vec![0.0]);
    }

    #[test]
    fn first_token_keeps_its_input_and_latent_slices() {
        let t = init_teacher(7, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 8.0 - 1.0).collect();
        let e = c.run(&x, &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(&e.row(0)[c.layout.x_slice()], &x[..]);
        assert_eq!(&e.row(0)[c.layout.z_slice()], &[0.0; 6]);
    }

    #[test]
    fn attention_update_is_linear_in_the_latent() {
        let t = init_teacher(8, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let z1 = [0.5, 0.0, 0.8, 0.0, 0.0, 0.0];
        let z2 = [0.0, 0.6, 0.0, 0.0, 0.9, 0.7];
        let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let upd = |z: &[f64]| attention_update(&c.weights, &embed_tokens(&x, z, &c.layout).unwrap()).unwrap();
        let (a, b, s) = (upd(&z1), upd(&z2), upd(&sum));
        for i in 0..s.len() {
            assert!((s.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn normalised_prediction_reproduces_teacher_labels() {
        use crate::taskgen::{mask_set, sample_batch, DistributionName, Support};
        let t = init_teacher(9, TeacherDims::default()).unwrap();
        let c = ConstructedModel::from_teacher(&t).unwrap();
        let dist = mask_set(DistributionName::Train(Support::Connected), 6).unwrap();
        for ep in sample_batch(&t, &dist, 4, 1, 10).unwrap() {
            assert!((c.predict_normalized(&t, &ep).unwrap() - ep.query_label()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_identity_module_with_ones_readout() {
        // gelu(1) + gelu(-1) = Φ(1) - Φ(-1) = erf(1/√2)
        let l = layout(1, 2, 2, 1);
        let w = build_construction(&[Tensor::identity(2)], &Tensor::full(&[1, 2], 1.0), &l).unwrap();
        let e = linear_block_forward(&w, &embed_tokens(&[1.0, -1.0], &[1.0], &l).unwrap()).unwrap();
        assert!((e.row(1)[l.output_slice()][0] - 0.682_689_492_137_085_9).abs() < 1e-15);
    }

    #[test]
    fn verification_rejects_zero_trials() {
        assert!(verify_dims(TeacherDims::default(), 0, 1e-6, 0).is_err());
    }
}
