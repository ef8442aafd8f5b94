//! Query-adaptive local matching of two feature maps: best responses per
//! location in both directions, the self-match and the correspondence map.

use candle_core::{Device, Tensor};
use tal::matching::{correspondence, qaconv_response, Direction};

fn main() -> tal::Result<()> {
    let dev = Device::Cpu;
    let query = Tensor::randn(0f32, 1.0, (16, 6, 2), &dev)?;
    // a gallery map that holds the query's rows in reverse order, plus noise
    let flipped = query.flip(&[1])?;
    let gallery = (flipped + Tensor::randn(0f32, 0.3, (16, 6, 2), &dev)?)?;

    let resp = qaconv_response(&query, &gallery, Direction::Bidirectional)?;
    let v = resp.to_vec()?;
    let (q, g) = v.split_at(12);
    println!("query-side best responses   {:?}", round(q));
    println!("gallery-side best responses {:?}", round(g));

    let own = qaconv_response(&query, &query, Direction::Query)?.to_vec()?;
    println!("self-match                  {:?}", round(&own));

    let idx = correspondence(&query, &gallery)?;
    println!("query location -> gallery location");
    for (i, j) in idx.iter().enumerate() {
        println!("  ({}, {}) -> ({}, {})", i / 2, i % 2, j / 2, j % 2);
    }
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
