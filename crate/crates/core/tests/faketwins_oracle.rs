//! The FakeTwins pipeline against a straight-line decomposition oracle, a
//! directional finite-difference check on its gradient w.r.t. generator
//! output pixels, and the head-only descent sanity run.

use hpgan_core::augment::{diff_augment, latent_perturb, AugmentPolicy, ImageBatch};
use hpgan_core::features::{pooled_representation, FeatureNetworkSpec, FeatureProjector};
use hpgan_core::gradcheck::{directional_derivative, scalar_rel_error, FD_STEP};
use hpgan_core::losses::{faketwins_from_images_g, faketwins_loss, FakeTwinsContext};
use hpgan_core::nets::{Adam, Generator, LinearHead};
use hpgan_core::ssl::{ssl_loss, EmbeddingBatch, SslObjectiveKind};
use hpgan_core::{Graph, RngStream, Tensor};
use ndarray::IxDyn;

fn tiny_projectors(seed: u64) -> (FeatureProjector, FeatureProjector) {
    let mut spec_a = FeatureNetworkSpec::conv(seed);
    spec_a.stage_channels = [4, 4, 4, 4];
    let mut spec_b = FeatureNetworkSpec::patch_attention(seed + 1);
    spec_b.stage_channels = [4, 4, 4, 4];
    spec_b.embed_dim = 8;
    spec_b.blocks = 1;
    spec_b.grid_side = 8;
    (
        FeatureProjector::build(spec_a).unwrap(),
        FeatureProjector::build(spec_b).unwrap(),
    )
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = RngStream::new(seed);
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        *v = rng.normal();
    }
    t
}

/// Straight-line oracle: each pipeline stage called through its value-level
/// public form, with the identical RNG draw order the fused graph uses.
fn pipeline_oracle(
    z: &Tensor,
    l1: f64,
    gen: &Generator,
    proj_a: &FeatureProjector,
    proj_b: &FeatureProjector,
    head_seed: u64,
    head_dims: (usize, usize),
    policy: &AugmentPolicy,
    objective: SslObjectiveKind,
    rng_seed: u64,
) -> f64 {
    let mut rng = RngStream::new(rng_seed);
    let z2 = latent_perturb(z, l1, &mut rng);
    let imgs_a = gen.generate(z).unwrap();
    let imgs_b = gen.generate(&z2).unwrap();
    let va = diff_augment(&ImageBatch::new(imgs_a).unwrap(), policy, &mut rng).unwrap();
    let vb = diff_augment(&ImageBatch::new(imgs_b).unwrap(), policy, &mut rng).unwrap();

    let embed = |view: &ImageBatch| -> EmbeddingBatch {
        let pyr_a = proj_a.pyramid(view.data()).unwrap();
        let pyr_b = proj_b.pyramid(view.data()).unwrap();
        let pooled = pooled_representation(&pyr_a, &pyr_b).unwrap();
        let mut head = LinearHead::build(head_dims.0, head_dims.1, head_seed);
        let mut g = Graph::new();
        let x = g.constant(pooled.into_dyn());
        let (out, _) = head.forward_g(&mut g, x, false).unwrap();
        EmbeddingBatch::new(
            g.value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
        )
        .unwrap()
    };
    let za = embed(&va);
    let zb = embed(&vb);
    ssl_loss(objective, &za, &zb).unwrap()
}

#[test]
fn pipeline_matches_straight_line_oracle() {
    let (pa, pb) = tiny_projectors(31);
    let gen = Generator::build(8, 32, 16, 3).unwrap();
    let policy = AugmentPolicy::default();
    let objective = SslObjectiveKind::BarlowTwins { lambda1: 0.005 };
    for seed in 0..5u64 {
        let z = rand_tensor(100 + seed, &[2, 8]);
        let ctx = FakeTwinsContext {
            proj_a: &pa,
            proj_b: &pb,
            policy: &policy,
            objective,
        };
        let mut head = LinearHead::build(32, 16, 7);
        let mut rng = RngStream::new(500 + seed);
        let fused = faketwins_loss(&z, 0.1, &gen, &ctx, &mut head, &mut rng).unwrap();
        let oracle = pipeline_oracle(
            &z,
            0.1,
            &gen,
            &pa,
            &pb,
            7,
            (32, 16),
            &policy,
            objective,
            500 + seed,
        );
        assert!(
            (fused - oracle).abs() < 1e-8,
            "seed {seed}: fused {fused} vs oracle {oracle}"
        );
    }
}

#[test]
fn gradient_wrt_generator_pixels_matches_fd() {
    let (pa, pb) = tiny_projectors(37);
    let policy = AugmentPolicy::default();
    let objective = SslObjectiveKind::BarlowTwins { lambda1: 0.005 };

    for seed in 0..20u64 {
        // the two branch image batches stand in for generator outputs
        let imgs_a0 = rand_tensor(1000 + seed, &[2, 3, 32, 32]).mapv(|v| 0.5 * v.tanh());
        let imgs_b0 = rand_tensor(2000 + seed, &[2, 3, 32, 32]).mapv(|v| 0.5 * v.tanh());

        let mut eval = |a: &Tensor| -> f64 {
            let mut head = LinearHead::build(32, 16, 7);
            let mut rng = RngStream::new(3000 + seed);
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(imgs_b0.clone());
            let head_handles = head.load_weights_g(&mut g, false);
            let ctx = FakeTwinsContext {
                proj_a: &pa,
                proj_b: &pb,
                policy: &policy,
                objective,
            };
            let loss = faketwins_from_images_g(
                &mut g,
                &ctx,
                av,
                bv,
                &mut head,
                &head_handles,
                &mut rng,
                false,
            )
            .unwrap();
            g.scalar_value(loss)
        };

        // analytic gradient w.r.t. branch-A pixels
        let analytic = {
            let mut head = LinearHead::build(32, 16, 7);
            let mut rng = RngStream::new(3000 + seed);
            let mut g = Graph::new();
            let av = g.leaf(imgs_a0.clone());
            let bv = g.constant(imgs_b0.clone());
            let head_handles = head.load_weights_g(&mut g, false);
            let ctx = FakeTwinsContext {
                proj_a: &pa,
                proj_b: &pb,
                policy: &policy,
                objective,
            };
            let loss = faketwins_from_images_g(
                &mut g,
                &ctx,
                av,
                bv,
                &mut head,
                &head_handles,
                &mut rng,
                false,
            )
            .unwrap();
            g.backward(loss);
            g.grad(av).unwrap().clone()
        };

        // three random directions per seed: dot-product test
        for d in 0..3u64 {
            let dir = rand_tensor(9000 + 10 * seed + d, imgs_a0.shape());
            let ana_dir: f64 = analytic
                .iter()
                .zip(dir.iter())
                .map(|(a, b)| a * b)
                .sum();
            let num_dir = directional_derivative(&mut eval, &imgs_a0, &dir, FD_STEP);
            let err = scalar_rel_error(ana_dir, num_dir);
            assert!(
                err < 1e-4,
                "seed {seed} dir {d}: analytic {ana_dir:.6e} vs fd {num_dir:.6e} (rel {err:.2e})"
            );
        }
    }
}

#[test]
fn identical_views_zero_invariance_term() {
    // augmentation off and l1 = 0 makes the branches identical; with the
    // off-diagonal weight at 0 the Barlow Twins loss reduces to the diagonal
    // invariance term, which the identical views null out exactly
    let (pa, pb) = tiny_projectors(41);
    let gen = Generator::build(8, 32, 16, 3).unwrap();
    let policy = AugmentPolicy::none();
    let z = rand_tensor(77, &[4, 8]);
    let ctx = FakeTwinsContext {
        proj_a: &pa,
        proj_b: &pb,
        policy: &policy,
        objective: SslObjectiveKind::BarlowTwins { lambda1: 1e-300 },
    };
    let mut head = LinearHead::build(32, 16, 7);
    let mut rng = RngStream::new(5);
    let loss = faketwins_loss(&z, 0.0, &gen, &ctx, &mut head, &mut rng).unwrap();
    assert!(loss.abs() < 1e-10, "invariance term should vanish, got {loss}");
}

#[test]
fn head_only_training_descends() {
    let (pa, pb) = tiny_projectors(43);
    let policy = AugmentPolicy::none();
    let objective = SslObjectiveKind::BarlowTwins { lambda1: 0.005 };
    // two fixed, slightly different views of the same underlying batch
    let imgs_a = rand_tensor(61, &[4, 3, 32, 32]).mapv(|v| 0.5 * v.tanh());
    let imgs_b = &imgs_a + &rand_tensor(62, &[4, 3, 32, 32]).mapv(|v| 0.05 * v.tanh());

    let mut head = LinearHead::build(32, 16, 9);
    let mut opt = Adam::new(2e-4, 0.0, 0.99, 1e-8, &head.weights());
    let mut losses = Vec::with_capacity(100);
    for _ in 0..100 {
        let mut rng = RngStream::new(0); // unused by the none policy
        let mut g = Graph::new();
        let av = g.constant(imgs_a.clone());
        let bv = g.constant(imgs_b.clone());
        let head_handles = head.load_weights_g(&mut g, true);
        let ctx = FakeTwinsContext {
            proj_a: &pa,
            proj_b: &pb,
            policy: &policy,
            objective,
        };
        let loss = faketwins_from_images_g(
            &mut g,
            &ctx,
            av,
            bv,
            &mut head,
            &head_handles,
            &mut rng,
            true,
        )
        .unwrap();
        losses.push(g.scalar_value(loss));
        g.backward(loss);
        let grads: Vec<Option<Tensor>> = head_handles
            .iter()
            .map(|&h| g.grad(h).cloned())
            .collect();
        opt.step(head.weights_mut(), &grads).unwrap();
    }
    // 10-step moving average, sampled every 10 steps, strictly decreasing
    let smoothed: Vec<f64> = (0..=90)
        .step_by(10)
        .map(|i| losses[i..i + 10].iter().sum::<f64>() / 10.0)
        .collect();
    for w in smoothed.windows(2) {
        assert!(
            w[1] < w[0],
            "smoothed loss failed to decrease: {smoothed:?}"
        );
    }
}
