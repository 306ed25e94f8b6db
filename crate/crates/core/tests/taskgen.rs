#![allow(clippy::needless_range_loop)]

use modicl_core::autodiff::Tensor;
use modicl_core::rng;
use modicl_core::taskgen::dataset::{read_dataset, write_dataset, Dataset, DatasetFormat, DatasetHeader};
use modicl_core::taskgen::{
    init_teacher, mask_set, opnorm, sample_batch, sample_latent, task_weights, DistributionName, Mask, Support,
    TeacherDims, INPUT_BOUND,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Singular values by one-sided Jacobi rotations on the columns.
fn jacobi_singular_values(w: &Tensor) -> Vec<f64> {
    let (rows, cols) = w.dims2().unwrap();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| w.at(&[i, j])).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|v| v * v).sum();
                let beta: f64 = a[q].iter().map(|v| v * v).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn all_masks(m: usize) -> Vec<Mask> {
    (1u32..1 << m)
        .map(|bits| Mask::new((0..m).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap())
        .collect()
}

#[test]
fn jacobi_oracle_on_known_matrices() {
    let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -4.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(jacobi_singular_values(&d), vec![4.0, 3.0]);
    // [[1,1],[0,1]] has singular values (1 ± √5)/2 in absolute value
    let s = jacobi_singular_values(&Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
    assert!((s[0] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-14);
    assert!((s[1] - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-14);
}

#[test]
fn power_iteration_matches_svd() {
    let mut r = rng::rng(21);
    for (rows, cols) in [(16, 16), (1, 16), (16, 1), (7, 3), (3, 9), (32, 32)] {
        for _ in 0..20 {
            let w = Tensor::from_fn(&[rows, cols], |_| r.sample(StandardNormal));
            let want = jacobi_singular_values(&w)[0];
            let got = opnorm(&w).unwrap();
            assert!(
                (got - want).abs() < 1e-8 * want.max(1.0),
                "{rows}x{cols}: {got} vs {want}"
            );
        }
    }
    let t = init_teacher(4, TeacherDims::default()).unwrap();
    let dist = mask_set(DistributionName::Control, 6).unwrap();
    for ep in sample_batch(&t, &dist, 2, 9, 200).unwrap() {
        let w = t.combine(&ep.latent).unwrap();
        let want = jacobi_singular_values(&w)[0];
        assert!((opnorm(&w).unwrap() - want).abs() < 1e-8);
    }
}

#[test]
fn task_weights_have_unit_norm() {
    let t = init_teacher(5, TeacherDims::default()).unwrap();
    let masks = all_masks(6);
    let mut r = rng::rng(6);
    for _ in 0..1000 {
        let mask = &masks[r.gen_range(0..masks.len())];
        let z = sample_latent(mask, &mut r).unwrap();
        let w = task_weights(&t, &z).unwrap();
        let svd = jacobi_singular_values(&w)[0];
        assert!((svd - 1.0).abs() < 1e-6, "{mask:?}: {svd}");
    }
}

#[test]
fn latent_invariants_on_every_mask() {
    let mut r = rng::rng(7);
    for mask in all_masks(6) {
        let k = mask.count() as f64;
        let mut mean = 0.0;
        for _ in 0..2000 {
            let z = sample_latent(&mask, &mut r).unwrap();
            for (&v, &b) in z.0.iter().zip(mask.bits()) {
                if b == 1 {
                    assert!((0.5..=1.0).contains(&v));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
            assert!((z.0.iter().sum::<f64>() - 0.5 * (1.0 + k)).abs() < 1e-12);
            mean += z.0[mask.bits().iter().position(|&b| b == 1).unwrap()];
        }
        // E z_i = ½(1 + 1/k); sd of one coordinate is below ½
        let mean = mean / 2000.0;
        assert!(
            (mean - 0.5 * (1.0 + 1.0 / k)).abs() < 4.0 * 0.5 / 2000f64.sqrt(),
            "{mask:?}: {mean}"
        );
    }
}

#[test]
fn simplex_marginals_are_uniform_and_beta() {
    let mut r = rng::rng(8);
    let two = Mask::hot(6, &[1, 4]);
    let s: Vec<f64> = (0..10_000)
        .map(|_| 2.0 * (sample_latent(&two, &mut r).unwrap().0[1] - 0.5))
        .collect();
    let d = ks_statistic(s, |x| x.clamp(0.0, 1.0));
    assert!(d < 0.02, "two-hot KS {d}");
    // one coordinate of the uniform 3-simplex is Beta(1, 2)
    let three = Mask::hot(6, &[0, 2, 5]);
    let s: Vec<f64> = (0..10_000)
        .map(|_| 2.0 * (sample_latent(&three, &mut r).unwrap().0[2] - 0.5))
        .collect();
    let d = ks_statistic(s, |x| 1.0 - (1.0 - x.clamp(0.0, 1.0)).powi(2));
    assert!(d < 0.02, "three-hot KS {d}");
}

#[test]
fn inputs_have_unit_variance_and_masks_are_uniform() {
    let t = init_teacher(1, TeacherDims::default()).unwrap();
    let dist = mask_set(DistributionName::Train(Support::ConnectedPlus), 6).unwrap();
    let eps = sample_batch(&t, &dist, 32, 3, 1200).unwrap();
    let xs: Vec<f64> = eps.iter().flat_map(|e| e.inputs.data().iter().copied()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.01, "{mean} {var}");
    assert!(xs.iter().all(|x| x.abs() <= INPUT_BOUND));
    let mut counts = vec![0usize; dist.masks.len()];
    for e in &eps {
        counts[dist.masks.iter().position(|m| *m == e.mask).unwrap()] += 1;
    }
    // 100 expected per mask; binomial sd ≈ 9.6
    assert!(counts.iter().all(|&c| (60..=140).contains(&c)), "{counts:?}");
}

#[test]
fn datasets_round_trip_bit_for_bit() {
    let dims = TeacherDims::default();
    let t = init_teacher(2, dims).unwrap();
    let name = DistributionName::Ood(Support::Connected);
    let dist = mask_set(name, 6).unwrap();
    let episodes = sample_batch(&t, &dist, 5, 11, 7).unwrap();
    let data = Dataset {
        header: DatasetHeader {
            modules: 6,
            input_dim: 16,
            hidden_dim: 16,
            output_dim: 1,
            context_len: 5,
            distribution: name,
            teacher_seed: 2,
            data_seed: 11,
            episodes: 7,
        },
        episodes,
    };
    let dir = tempfile::tempdir().unwrap();
    for (file, format) in [("d.bin", DatasetFormat::Binary), ("d.json", DatasetFormat::Json)] {
        let path = dir.path().join(file);
        write_dataset(&path, &data, format).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, data, "{file}");
        for (a, b) in back.episodes.iter().zip(&data.episodes) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.inputs), bits(&b.inputs));
        }
    }
    let bin = dir.path().join("d.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_dataset(&bin).is_err());
    let mut bad = data.clone();
    bad.header.episodes = 8;
    assert!(write_dataset(&dir.path().join("x.bin"), &bad, DatasetFormat::Binary).is_err());
}

proptest! {
    #[test]
    fn latents_respect_their_mask(bits in 1u32..64, seed in any::<u64>()) {
        let mask = Mask::new((0..6).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap();
        let z = sample_latent(&mask, &mut rng::rng(seed)).unwrap();
        for (&v, &b) in z.0.iter().zip(mask.bits()) {
            prop_assert_eq!(v > 0.0, b == 1);
            prop_assert!(b == 0 || (0.5..=1.0).contains(&v));
        }
        prop_assert!((z.0.iter().sum::<f64>() - 0.5 * (1.0 + mask.count() as f64)).abs() < 1e-12);
    }

    #[test]
    fn task_weights_are_scale_free(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let t = init_teacher(seed, TeacherDims { modules: 4, input: 5, hidden: 3, output: 1 }).unwrap();
        let mut r = rng::rng(seed);
        let z = sample_latent(&Mask::hot(4, &[0, 3]), &mut r).unwrap();
        let zs = modicl_core::taskgen::TaskLatent(z.0.iter().map(|v| v * scale).collect());
        let (a, b) = (task_weights(&t, &z).unwrap(), task_weights(&t, &zs).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
