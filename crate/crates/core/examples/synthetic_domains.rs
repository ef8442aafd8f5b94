//! Renders the three synthetic source domains and the held-out target,
//! prints their colour statistics and optionally writes the tree to disk.
//!
//! cargo run --release --example synthetic_domains -- [out_dir]

use std::path::PathBuf;

use tal::data::synthetic::{channel_means, min_style_gap, write_market_tree};
use tal::data::{generate_synthetic, SyntheticConfig};

fn main() -> tal::Result<()> {
    let cfg = SyntheticConfig::default();
    let bundle = generate_synthetic(&cfg)?;
    for d in &bundle.train {
        let [r, g, b] = channel_means(&[d]);
        println!(
            "{:<10} {:>4} images {:>3} ids   mean rgb {r:.3} {g:.3} {b:.3}",
            d.name,
            d.len(),
            d.num_identities()
        );
    }
    let [r, g, b] = channel_means(&[&bundle.query, &bundle.gallery]);
    println!(
        "{:<10} {:>4} query / {} gallery   mean rgb {r:.3} {g:.3} {b:.3}",
        "target",
        bundle.query.len(),
        bundle.gallery.len()
    );
    println!("smallest style gap {:.3} (required {})", min_style_gap(&bundle), cfg.min_style_gap);

    if let Some(out) = std::env::args().nth(1).map(PathBuf::from) {
        let files = write_market_tree(&bundle, &out, "target")?;
        println!("wrote {} files under {}", files.len(), out.display());
    }
    Ok(())
}
