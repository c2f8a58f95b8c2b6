//! Exact objective and its variational bound on a small discrete system,
//! then the bound check over many random systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdpb::objective::RdpbWeights;
use rdpb::oracle::{bound_gap, exact_q, exact_rdpb, exact_rdpvb, random_q, random_system, verify};

fn main() -> rdpb::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sys = random_system(&mut rng);
    let w = RdpbWeights {
        beta: 0.5,
        lambda: 1.0,
        mu: 0.5,
        threshold: f64::INFINITY,
    };
    let exact = exact_rdpb(&sys, &w)?;
    println!("|X|={} |Y|={} |Z|={}", sys.nx(), sys.ny(), sys.nz());
    println!("terms: {:?}", exact.terms);
    println!("objective {:.6} (with H(Y) removed: {:.6})", exact.with_hy, exact.without_hy);

    let q = random_q(&sys, &mut rng);
    let bound = exact_rdpvb(&sys, &q, &w)?;
    let (gy, gz) = bound_gap(&sys, &q)?;
    println!("random q: bound {:.6}, gaps ({gy:.6}, {gz:.6})", bound.value);
    let tight = exact_rdpvb(&sys, &exact_q(&sys)?, &w)?;
    println!("exact q:  bound {:.6}", tight.value);

    let summary = verify(1000, 1)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
