//! The network graph wired with ground-truth abundances, endmembers and
//! degradation operators in place of the encoders and learned layers.

use hsfuse::losses::{total_loss, LossParts, LossWeights};
use hsfuse::mixing::{apply_psf, lrmsi_consistency, EndmemberMatrix};
use hsfuse::network::{consistency_outputs, Encoded, Forward};
use hsfuse::sim::Scene;
use hsfuse::tensor::{Tape, Tensor, Var};

/// Largest deviations of the exact-model outputs.
#[derive(Clone, Copy, Debug)]
pub struct ExactGaps {
    pub lrmsi: f64,
    pub fused_vs_latent: f64,
    pub lr_msi_x_vs_y: f64,
    pub fused_lr_vs_x: f64,
    pub fused_ms_vs_y: f64,
    pub loss: LossParts,
}

impl ExactGaps {
    pub fn worst_consistency(&self) -> f64 {
        [self.lrmsi, self.lr_msi_x_vs_y, self.fused_lr_vs_x, self.fused_ms_vs_y, self.loss.consistency]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Decoder layout `[bands, K]`.
fn decoder(e: &EndmemberMatrix) -> Tensor<f64> {
    Tensor::from_fn(vec![e.bands(), e.count()], |i| e.row(i % e.count())[i / e.count()])
}

fn max_gap(tape: &Tape<f64>, p: Var, q: Var) -> f64 {
    tape.value(p)
        .data()
        .iter()
        .zip(tape.value(q).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn exact_gaps(scene: &Scene) -> ExactGaps {
    let lrmsi = lrmsi_consistency(&scene.lr_hsi, &scene.hr_msi, &scene.srf, &scene.psf).unwrap();
    let r = scene.psf.ratio();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(scene.lr_hsi.to_tensor()).unwrap();
    let y = tape.constant(scene.hr_msi.to_tensor()).unwrap();
    // the SRF layer stores `[l, L]`; the fixed operator is `L x l`
    let (bands, ch) = (scene.srf.bands(), scene.srf.channels());
    let srf = tape
        .constant(Tensor::from_fn(vec![ch, bands], |i| scene.srf.get(i % bands, i / bands)))
        .unwrap();
    let psf = tape.constant(Tensor::new(vec![r, r], scene.psf.data().to_vec()).unwrap()).unwrap();
    let a = tape.constant(decoder(&scene.endmembers)).unwrap();
    let a_ms = tape.constant(decoder(&scene.endmembers.project(&scene.srf).unwrap())).unwrap();
    let s_cube = scene.abundances.to_cube().unwrap();
    let s = tape.constant(s_cube.to_tensor()).unwrap();
    let s_lr = tape.constant(apply_psf(&s_cube, &scene.psf).unwrap().to_tensor()).unwrap();

    let fused = tape.channel_matmul(a, s).unwrap();
    let (from_x, from_y, fused_lr, fused_ms) = consistency_outputs(&mut tape, srf, psf, x, y, fused).unwrap();
    let x_rec = tape.channel_matmul(a, s_lr).unwrap();
    let y_rec = tape.channel_matmul(a_ms, s).unwrap();
    let latent = tape.constant(scene.latent.to_tensor()).unwrap();

    let fwd = Forward {
        x,
        y,
        abundances: Encoded { hs: s_lr, ms: s },
        x_rec,
        y_rec,
        fused,
        fused_lr,
        fused_ms: Some(fused_ms),
        lr_msi_from_x: Some(from_x),
        lr_msi_from_y: Some(from_y),
    };
    let loss = total_loss(&mut tape, &fwd, &LossWeights::default(), None).unwrap().values(&tape);
    ExactGaps {
        lrmsi,
        fused_vs_latent: max_gap(&tape, fused, latent),
        lr_msi_x_vs_y: max_gap(&tape, from_x, from_y),
        fused_lr_vs_x: max_gap(&tape, fused_lr, x),
        fused_ms_vs_y: max_gap(&tape, fused_ms, y),
        loss,
    }
}
