//! Fixed-seed invariant checks: spectral oracle agreement, loss identities
//! and the perturbation budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verbose_lab::attack::{
    craft_verbose_image, loss_diversity, loss_eos, loss_uncertainty, pgd_step, uniform_start, AttackConfig,
};
use verbose_lab::tensor::{svd_thin, Tape};
use verbose_lab::vlm::{synth_dataset, ToyVlm};
use verbose_lab::Image;

use super::{entropy, fd_grad, max_rel_err, nuclear_oracle};

pub const BUDGET_SLACK: f32 = 1e-7;

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<f32> {
    (0..m * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn nuclear_norm_matches_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100 {
        let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = random_matrix(&mut rng, m, n);
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let want = nuclear_oracle(m, n, &a64);
        let got = svd_thin(m, n, &a).unwrap().nuclear_norm();
        assert!((got - want).abs() <= 1e-5, "case {case} ({m}x{n}): {got} vs {want}");

        let tape = Tape::new();
        let t = tape.constant(&[m, n], a.clone()).unwrap();
        let on_tape = t.nuclear_norm().unwrap().item() as f64;
        assert!((on_tape - want).abs() <= 1e-5 * want.max(1.0), "case {case}: tape {on_tape} vs {want}");
    }
}

pub fn nuclear_norm_gradient_is_u_vt_on_full_rank_5x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let a = random_matrix(&mut rng, 5, 4);
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let tape = Tape::new();
        let t = tape.leaf(&[5, 4], a.clone()).unwrap();
        let g = t.nuclear_norm().unwrap().backward().unwrap().get_or_zeros(&t);
        let g64: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let numeric = fd_grad(|x| nuclear_oracle(5, 4, x), &a64, 1e-6);
        let err = max_rel_err(&g64, &numeric);
        assert!(err <= 1e-3, "case {case}: rel err {err}");
        let uvt = svd_thin(5, 4, &a).unwrap().u_vt();
        assert!(max_rel_err(&uvt, &numeric) <= 1e-3);
    }
}

/// 1000 chained steps with adversarially large gradients and pixels pinned
/// at the range edges.
pub fn pgd_fuzz_thousand_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 8.0 / 255.0;
    let data: Vec<f32> = (0..3 * 32 * 32)
        .map(|i| match i % 3 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    let x_ref = Image::new(3, 32, 32, data).unwrap();
    let mut x = uniform_start(&x_ref, eps, &mut rng);
    let mut violations = 0;
    for _ in 0..1000 {
        let grad: Vec<f32> = (0..x.len()).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        x = pgd_step(&x, &x_ref, &grad, 1.0 / 255.0, eps);
        if x.linf_dist(&x_ref) > eps + BUDGET_SLACK || !x.in_unit_range() {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

pub fn full_attacks_stay_in_budget() {
    let model = ToyVlm::standard(3);
    for (i, s) in synth_dataset(4, 17, &model.vocab).iter().enumerate() {
        let cfg = AttackConfig {
            iters: 25,
            unroll_cap: 16,
            seed: i as u64,
            eval_policies: Vec::new(),
            ..AttackConfig::default()
        };
        let r = craft_verbose_image(&model, &s.image, &cfg).unwrap();
        for rec in &r.curve {
            assert!(rec.linf <= cfg.epsilon + BUDGET_SLACK, "iter {}: {}", rec.iter, rec.linf);
        }
        assert!(r.x_adv.in_unit_range());
        assert!(r.x_adv.linf_dist(&s.image) <= cfg.epsilon + BUDGET_SLACK);
    }
}

fn random_softmax_rows(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * v);
    for _ in 0..n {
        let scale = rng.gen_range(0.0f32..8.0);
        let z: Vec<f32> = (0..v).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f32 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / s));
    }
    out
}

/// `L₂ = Σ (ln V − H(fᵢ))`, `L₁ ∈ [0, 1]`, and `L₃ = −√N‖g‖` for `N`
/// copies of one hidden row, over `cases` random draws.
pub fn loss_identities(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..cases {
        let (n, v) = (rng.gen_range(1..10), rng.gen_range(2..40));
        let probs = random_softmax_rows(&mut rng, n, v);
        let tape = Tape::new();
        let p = tape.constant(&[n, v], probs.clone()).unwrap();
        let l2 = loss_uncertainty(&p).unwrap().item() as f64;
        let want: f64 = probs
            .chunks(v)
            .map(|r| (v as f64).ln() - entropy(&r.iter().map(|&x| x as f64).collect::<Vec<_>>()))
            .sum();
        assert!((l2 - want).abs() <= 1e-6 * want.abs().max(1.0), "case {case}: L2 {l2} vs {want}");
        let l1 = loss_eos(&p, rng.gen_range(0..v)).unwrap().item();
        assert!((0.0..=1.0).contains(&l1), "case {case}: L1 {l1}");

        let c = rng.gen_range(1..64);
        let g: Vec<f32> = (0..c).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let norm = g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let h = tape.constant(&[n, c], g.iter().cycle().take(n * c).cloned().collect()).unwrap();
        let l3 = loss_diversity(&h).unwrap().item() as f64;
        let want = -(n as f64).sqrt() * norm;
        assert!((l3 - want).abs() <= 1e-5 * want.abs().max(1.0), "case {case}: L3 {l3} vs {want}");
    }
}
