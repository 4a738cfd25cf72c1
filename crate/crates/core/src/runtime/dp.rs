use rand_distr::{Distribution, Normal};

use crate::gpd::{GpdPacket, Payload, SvdTriple};
use crate::rng::StreamRng;

fn perturb(values: &mut [f64], normal: &Normal<f64>, rng: &mut StreamRng) {
    for v in values {
        *v += normal.sample(rng);
    }
}

fn perturb_triple(t: &mut SvdTriple, normal: &Normal<f64>, rng: &mut StreamRng) {
    perturb(t.u.data_mut(), normal, rng);
    perturb(&mut t.s, normal, rng);
    for s in &mut t.s {
        *s = s.max(0.0);
    }
    perturb(t.v.data_mut(), normal, rng);
}

/// Adds i.i.d. `N(0, tau²)` noise to every transmitted scalar. Singular
/// values are clamped at zero afterwards. `tau = 0` returns the packet as is.
pub fn add_dp_noise(packet: &GpdPacket, tau: f64, rng: &mut StreamRng) -> GpdPacket {
    let mut out = packet.clone();
    if tau == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, tau).expect("finite non-negative tau");
    for rec in &mut out.records {
        match &mut rec.payload {
            Payload::Raw(v) => perturb(v, &normal, rng),
            Payload::Gpd { p, n, .. } => {
                perturb_triple(p, &normal, rng);
                perturb_triple(n, &normal, rng);
            }
        }
    }
    out
}
