//! Domain-adaptive normalization: per-sample mixture weights over three
//! per-domain experts and the mixed output next to each expert's.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tal::nn::{BnMode, Grad};
use tal::{DabnHead, DsbnBank};

fn main() -> tal::Result<()> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, c) = (3, 8);
    let bank = DsbnBank::new(k, c, DType::F64, &dev)?;
    // experts that disagree: different means and scales per domain
    for d in 0..k {
        let shift = d as f64 - 1.0;
        let full = |v: f64| Tensor::full(v, c, &dev);
        bank.set_domain(d, &full(1.0 + 0.5 * d as f64)?, &full(shift)?, &full(shift)?, &full(1.0 + d as f64)?)?;
    }
    let head = DabnHead::new(c, k, 4, &mut rng, DType::F64, &dev)?;

    let x = Tensor::randn(0.0, 1.0, (4, c, 6, 2), &dev)?;
    let alpha = head.weights(&x, Grad::Stop)?.to_vec2::<f64>()?;
    let mixed = head.forward(&x, &bank, Grad::Stop)?;
    let experts: Vec<Tensor> = (0..k)
        .map(|d| bank.forward(&x, d, BnMode::Eval, Grad::Stop))
        .collect::<tal::Result<_>>()?;

    println!("sample  alpha                    mixed   expert outputs (first element)");
    for (i, a) in alpha.iter().enumerate() {
        let first = |t: &Tensor| -> tal::Result<f64> { Ok(t.get(i)?.flatten_all()?.get(0)?.to_scalar::<f64>()?) };
        let outs: Vec<String> = experts
            .iter()
            .map(|e| first(e).map(|v| format!("{v:+.3}")))
            .collect::<tal::Result<_>>()?;
        println!(
            "{i:>6}  [{:.3} {:.3} {:.3}]   {:+.3}  {}",
            a[0],
            a[1],
            a[2],
            first(&mixed)?,
            outs.join(" ")
        );
    }
    Ok(())
}
