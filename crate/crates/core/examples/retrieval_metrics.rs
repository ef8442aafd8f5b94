//! mAP and CMC with camera exclusion, and how the two streams' scores are
//! fused before ranking.

use tal::evaluation::{compute_map_cmc, fuse_scores, random_map_expectation, FusionMode, RetrievalLabels};
use tal::matching::ScoreMatrix;

fn main() -> tal::Result<()> {
    // queries of ids 1 and 2 seen by camera 1; gallery from both cameras
    let query_ids = [1, 2];
    let query_cams = [1, 1];
    let gallery_ids = [1, 2, 1, 3, 2, 1];
    let gallery_cams = [2, 2, 1, 2, 2, 2];
    let labels = RetrievalLabels {
        query_ids: &query_ids,
        gallery_ids: &gallery_ids,
        query_cams: &query_cams,
        gallery_cams: &gallery_cams,
    };
    let ds = ScoreMatrix::new(2, 6, vec![
        0.9, 0.8, 0.99, 0.1, 0.3, 0.2, //
        0.2, 0.7, 0.4, 0.6, 0.5, 0.1,
    ])?;
    // the invariant stream lives on another scale
    let di = ScoreMatrix::new(2, 6, vec![
        12.0, 3.0, 15.0, 1.0, 2.0, 11.0, //
        1.0, 9.0, 2.0, 10.0, 8.0, 0.0,
    ])?;

    for mode in [FusionMode::Ds, FusionMode::Di, FusionMode::RawSum, FusionMode::Sum] {
        let res = compute_map_cmc(&fuse_scores(&ds, &di, mode)?, &labels)?;
        println!("{:<8} mAP {:.4}  top-1 {:.2}  top-3 {:.2}", mode.name(), res.map, res.top(1), res.top(3));
        for q in &res.queries {
            println!("         query {} ranks gallery {:?}, AP {:.4}", q.query, q.gallery, q.ap.unwrap_or(0.0));
        }
    }
    // gallery 2 shares id and camera with query 0 and never appears in a ranking
    println!("random-ranking mAP {:.4}", random_map_expectation(&labels));
    Ok(())
}
