//! The renderer as a single tape op with a hand-derived adjoint.
//!
//! Inputs (all per Gaussian): positions [G×3], decoded scales [G×3], unit
//! quaternions [G×4], opacities [G], payload [G×C] (rgb then query channels).
//! Output: [H·W × (C+1)] with the alpha map as the last column. Contribution
//! statistics ride along outside the graph.

use super::composite::{composite_backward, composite_reference, composite_tiled};
use super::{covariance, covariance_backward, project_backward, prepare_splats, CompositeMode,
            RenderOptions, Splat2D};
use crate::diffcore::{CustomOp, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::scaffold::Camera;

/// Tape handle for the rendered channels plus per-Gaussian statistics.
pub struct RenderResult<T> {
    /// [H·W × (C+1)]: payload channels then alpha.
    pub image: NodeId,
    /// Σ over pixels of T·α·G per Gaussian.
    pub contrib: Vec<T>,
    /// Pixels with α·G above the hit threshold, per Gaussian.
    pub hits: Vec<u32>,
    /// Survived culling this view (has a splat).
    pub visible: Vec<bool>,
    pub culled: usize,
    pub singular: usize,
}

struct RenderBackward<T> {
    splats: Vec<Splat2D<T>>,
    cam: Camera<T>,
    opts: RenderOptions<T>,
    payload_dim: usize,
    gauss_count: usize,
}

impl<T: Real> CustomOp<T> for RenderBackward<T> {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        grad_inputs: &mut [Vec<T>],
    ) {
        let positions = inputs[0].data();
        let scales = inputs[1].data();
        let quats = inputs[2].data();
        let payload = inputs[4].data();

        let sg = composite_backward(
            &self.splats,
            payload,
            self.payload_dim,
            self.gauss_count,
            self.cam.width,
            self.cam.height,
            &self.opts,
            output.data(),
            grad_out,
            self.opts.mode,
        );

        // Chain splat-space grads through projection and covariance
        // composition back to the per-Gaussian inputs.
        for (si, s) in self.splats.iter().enumerate() {
            let g = s.gauss as usize;
            let mu = [positions[g * 3], positions[g * 3 + 1], positions[g * 3 + 2]];
            let sc = [scales[g * 3], scales[g * 3 + 1], scales[g * 3 + 2]];
            let q = [
                quats[g * 4],
                quats[g * 4 + 1],
                quats[g * 4 + 2],
                quats[g * 4 + 3],
            ];
            let cov_world = covariance(sc, q);
            let (d_mu, d_cov_world) =
                project_backward(mu, &cov_world, &self.cam, sg.d_mean[si], &sg.d_cov[si]);
            let (d_scale, d_quat) = covariance_backward(sc, q, &d_cov_world);
            for d in 0..3 {
                grad_inputs[0][g * 3 + d] += d_mu[d];
                grad_inputs[1][g * 3 + d] += d_scale[d];
            }
            for d in 0..4 {
                grad_inputs[2][g * 4 + d] += d_quat[d];
            }
            grad_inputs[3][g] += sg.d_alpha[si];
        }
        grad_inputs[4].copy_from_slice(&sg.d_payload);
    }
}

/// Record a full differentiable render on the tape.
pub fn render<T: Real>(
    tape: &mut Tape<T>,
    positions: NodeId,
    scales: NodeId,
    quats: NodeId,
    alphas: NodeId,
    payload: NodeId,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Result<RenderResult<T>> {
    let g = tape.value(alphas).numel();
    let check = |node: NodeId, cols: usize, what: &str| -> Result<()> {
        let v = tape.value(node);
        if v.numel() != g * cols {
            return Err(Error::Dimension(format!(
                "render: {what} has {} values, want {}×{}",
                v.numel(),
                g,
                cols
            )));
        }
        Ok(())
    };
    check(positions, 3, "positions")?;
    check(scales, 3, "scales")?;
    check(quats, 4, "quaternions")?;
    let pdim = tape.value(payload).dims2().1;
    check(payload, pdim, "payload")?;

    let (splats, culled, singular) = prepare_splats(
        tape.value(positions).data(),
        tape.value(scales).data(),
        tape.value(quats).data(),
        tape.value(alphas).data(),
        cam,
        opts,
    );
    let out = match opts.mode {
        CompositeMode::Reference => composite_reference(
            &splats,
            tape.value(payload).data(),
            pdim,
            g,
            cam.width,
            cam.height,
            opts,
        ),
        CompositeMode::Tiled => composite_tiled(
            &splats,
            tape.value(payload).data(),
            pdim,
            g,
            cam.width,
            cam.height,
            opts,
        ),
    };

    let mut visible = vec![false; g];
    for s in &splats {
        visible[s.gauss as usize] = true;
    }
    let value = Tensor::new(vec![cam.width * cam.height, pdim + 1], out.channels)?;
    let op = RenderBackward {
        splats,
        cam: cam.clone(),
        opts: opts.clone(),
        payload_dim: pdim,
        gauss_count: g,
    };
    let image = tape.custom(
        Box::new(op),
        vec![positions, scales, quats, alphas, payload],
        value,
    );
    Ok(RenderResult {
        image,
        contrib: out.contrib,
        hits: out.hits,
        visible,
        culled,
        singular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, ParamGroup, ParamStore};
    use crate::real::rl;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera<f64> {
        Camera::look_at(
            0,
            [0.0, -1.2, 0.4],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            30.0,
            30.0,
            12,
            12,
        )
    }

    /// Full chain: raw params → activations → render → weighted scalar.
    fn build_loss(
        tape: &mut Tape<f64>,
        store: &ParamStore<f64>,
        ids: &[crate::diffcore::ParamId; 5],
        cam: &Camera<f64>,
        opts: &RenderOptions<f64>,
    ) -> crate::error::Result<NodeId> {
        let pos = tape.param(store, ids[0]);
        let scale_raw = tape.param(store, ids[1]);
        let quat_raw = tape.param(store, ids[2]);
        let alpha_raw = tape.param(store, ids[3]);
        let payload = tape.param(store, ids[4]);

        let scale = tape.softplus(scale_raw);
        let scale = tape.mul_scalar(scale, 0.08);
        let (quat, _) = tape.normalize_rows_guarded(quat_raw, 1e-8, &[1.0, 0.0, 0.0, 0.0])?;
        let alpha = tape.sigmoid(alpha_raw);
        let r = render(tape, pos, scale, quat, alpha, payload, cam, opts)?;

        let n = tape.value(r.image).numel();
        let shape = tape.value(r.image).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = tape.constant(Tensor::new(shape, w)?);
        let prod = tape.mul(r.image, wc)?;
        Ok(tape.sum_all(prod))
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let cam = test_camera();
        for mode in [CompositeMode::Reference, CompositeMode::Tiled] {
            let opts = RenderOptions {
                mode,
                tile_size: 8,
                ..RenderOptions::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let g = 3usize;
            let pdim = 5usize;
            let mut store = ParamStore::new();
            let pos: Vec<f64> = (0..g * 3).map(|_| rng.gen_range(-0.15..0.15)).collect();
            let ids = [
                store.add("pos", ParamGroup::AnchorOffset, Tensor::new(vec![g, 3], pos).unwrap()),
                store.add(
                    "scale_raw",
                    ParamGroup::AnchorScale,
                    Tensor::new(
                        vec![g, 3],
                        (0..g * 3).map(|_| rng.gen_range(-0.5..0.8)).collect(),
                    )
                    .unwrap(),
                ),
                store.add(
                    "quat_raw",
                    ParamGroup::Mlp,
                    Tensor::new(
                        vec![g, 4],
                        (0..g * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                ),
                store.add(
                    "alpha_raw",
                    ParamGroup::Mlp,
                    Tensor::new(vec![g], (0..g).map(|_| rng.gen_range(-1.0..1.5)).collect())
                        .unwrap(),
                ),
                store.add(
                    "payload",
                    ParamGroup::Mlp,
                    Tensor::new(
                        vec![g, pdim],
                        (0..g * pdim).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    )
                    .unwrap(),
                ),
            ];

            store.zero_grad();
            let mut tape = Tape::new();
            let loss = build_loss(&mut tape, &store, &ids, &cam, &opts).unwrap();
            tape.backward_into(loss, &mut store).unwrap();

            let f = |s: &ParamStore<f64>| -> crate::error::Result<f64> {
                let mut t = Tape::new();
                let l = build_loss(&mut t, s, &ids, &cam, &opts)?;
                Ok(t.value(l).scalar_value())
            };
            let err = finite_diff_check(f, &mut store, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?}: fd err {err}");
        }
    }

    #[test]
    fn culled_gaussian_gets_zero_gradient() {
        let cam = test_camera();
        let opts = RenderOptions::default();
        let mut store = ParamStore::new();
        // One gaussian in view, one behind the camera.
        let ids = [
            store.add(
                "pos",
                ParamGroup::AnchorOffset,
                Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 0.0, -3.0, 0.2]).unwrap(),
            ),
            store.add(
                "scale_raw",
                ParamGroup::AnchorScale,
                Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap(),
            ),
            store.add(
                "quat_raw",
                ParamGroup::Mlp,
                Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
            ),
            store.add(
                "alpha_raw",
                ParamGroup::Mlp,
                Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(),
            ),
            store.add(
                "payload",
                ParamGroup::Mlp,
                Tensor::new(vec![2, 5], vec![0.5; 10]).unwrap(),
            ),
        ];
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, &store, &ids, &cam, &opts).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        // Behind-camera gaussian: no gradient through any of its rows.
        assert!(store.grad(ids[0]).row(1).iter().all(|&v| v == 0.0));
        assert!(store.grad(ids[4]).row(1).iter().all(|&v| v == 0.0));
        assert!(store.grad(ids[0]).row(0).iter().any(|&v| v != 0.0));
        let _ = rl::<f64>(0.0);
    }
}
