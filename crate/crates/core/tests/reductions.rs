mod common;

use common::checks;

#[test]
fn single_domain_adaptive_norm_is_the_expert() {
    assert!(checks::single_domain_dabn_is_dsbn(21) < 1e-6);
}

#[test]
fn one_hot_attention_is_plain_multiscale() {
    assert!(checks::one_hot_msda_is_ms(22) < 1e-6);
}

#[test]
fn single_scale_is_base_matching() {
    assert!(checks::single_scale_ms_is_qaconv(23) < 1e-6);
}

#[test]
fn all_experts_pass_matches_separate_passes() {
    use candle_core::{DType, Device};
    use tal::backbone::ForwardOptions;
    use tal::{Backbone, BackboneConfig};
    let mut r = common::rng(24);
    let cfg = BackboneConfig { input_height: 16, input_width: 8, ..BackboneConfig::default() };
    let net = Backbone::new(&cfg, 3, &mut r, DType::F64, &Device::Cpu).unwrap();
    for site in net.sites() {
        for d in 0..3 {
            common::Expert::random(&mut r, site.dsbn.channels()).install(&site.dsbn, d);
        }
    }
    let x = common::tensor(&common::uniform_vec(&mut r, 2 * 3 * 16 * 8, -1.0, 1.0), &[2, 3, 16, 8]);
    let all = net.extract_all_experts(&x, ForwardOptions::EVAL).unwrap();
    for (d, set) in all.iter().enumerate() {
        let one = net.extract_expert(&x, d, ForwardOptions::EVAL).unwrap();
        for (a, b) in set.maps.iter().zip(&one.maps) {
            assert!(common::max_abs_diff(&common::values(a), &common::values(b)) < 1e-12);
        }
    }
}
