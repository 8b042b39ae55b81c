//! Scalar random walk observed directly: the ensemble filter against the
//! closed-form Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use uavtse::enkf::{analysis_linear, propagate, NoiseSpec, ObservationBatch, ObservationOperator};
use uavtse::rng::{derive_seed, substream};
use uavtse::Ensemble;

fn main() -> uavtse::Result<()> {
    let (q, r, n) = (0.5_f64, 1.0_f64, 5000);
    let mut rng = substream(3, &[]);
    let prior = Normal::new(0.0, 2.0).unwrap();
    let mut ens = Ensemble::new(DMatrix::from_fn(1, n, |_, _| prior.sample(&mut rng)))?;
    let (mut m, mut p) = (0.0, 4.0);
    let h = DMatrix::from_element(1, 1, 1.0);
    for (t, y) in [1.2, 0.7, 1.9, 2.4, 2.1].into_iter().enumerate() {
        let noise = NoiseSpec {
            model_noise_std: DVector::from_element(1, q),
            seed: derive_seed(3, &[1, t as u64]),
        };
        ens = propagate(&ens, |x| Ok(x.clone()), &noise)?;
        let obs = ObservationBatch::sample(
            DVector::from_element(1, y),
            DVector::from_element(1, r),
            n,
            derive_seed(3, &[2, t as u64]),
            ObservationOperator::Linear(h.clone()),
        )?;
        let out = analysis_linear(&ens, &obs)?;
        ens = out.posterior;

        p += q * q;
        let k = p / (p + r * r);
        m += k * (y - m);
        p *= 1.0 - k;
        println!(
            "t={t}: EnKF mean {:.3} var {:.3} | KF mean {m:.3} var {p:.3}",
            ens.mean()[0],
            out.covariance[(0, 0)]
        );
    }
    Ok(())
}
