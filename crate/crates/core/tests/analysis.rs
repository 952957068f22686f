use nxfp::analysis::*;
use nxfp::*;
use proptest::prelude::*;

const E2M1: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

#[test]
fn profile_counts_gaps() {
    // E = 2, so the scaled space equals the value space for E2M1.
    let h = profile_scaled_distribution(&[7.0, -6.5, 5.0, 1.0], &QuantConfig::mxfp(4, 2)).unwrap();
    assert_eq!(h.total(), 4);
    assert_eq!(h.outlier_gap_fraction, 0.5);
    assert_eq!(h.vacant_gap_fraction, 0.25);
    assert_eq!(h.edges.first(), Some(&-8.0));
    assert_eq!(h.edges.last(), Some(&8.0));
    assert!(h
        .to_csv()
        .starts_with("bin_left,bin_right,count\n-8,-7.75,"));

    let on_levels = [6.0, -4.0, 3.0, 0.5, 0.0, -1.5];
    let h = profile_scaled_distribution(&on_levels, &QuantConfig::mxfp(4, 2)).unwrap();
    assert_eq!((h.outlier_gap_fraction, h.vacant_gap_fraction), (0.0, 0.0));
}

#[test]
fn profile_gaussian_baseline() {
    let v = synth_weights(SynthModel::Gaussian, 32_000, 11);
    let h = profile_scaled_distribution(&v, &QuantConfig::mxfp(4, 2)).unwrap();
    assert_eq!(h.total(), 32_000);
    assert_eq!(h.outlier_gap_fraction, 813.0 / 32_000.0);
    assert_eq!(h.vacant_gap_fraction, 2779.0 / 32_000.0);
}

#[test]
fn aggregate_is_weighted_block_mean() {
    let v = synth_weights(SynthModel::OutlierInjected, 1000, 3);
    let ev = evaluate(&v, &QuantConfig::nxfp(4, 2)).unwrap();
    let weighted: f64 = ev
        .blocks
        .iter()
        .map(|b| b.report.mse * b.report.len as f64)
        .sum::<f64>()
        / 1000.0;
    assert!((ev.mse() - weighted).abs() <= 1e-15 * weighted);
    assert_eq!(ev.elements(), 1000);
}

#[test]
fn representable_tensor_has_no_reduction() {
    let v: Vec<f32> = (0..256)
        .map(|i| [6.0f32, -4.0, 0.5, 3.0, -1.5, 2.0, 0.0, 1.0][i % 8])
        .collect();
    let r = ablation_sweep(&v, 4, 32).unwrap();
    for label in ["baseline", "NM", "NM+AM", "NM+AM+CR"] {
        let row = r.row(label).unwrap();
        assert_eq!(row.mse, 0.0);
        assert_eq!(row.reduction, 0.0);
    }
    let csv = r.to_csv();
    assert!(csv.starts_with(
        "label,format,bits_per_element,elements,mse,mean_abs,max_abs,bfp_fraction,reduction\n"
    ));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn duplicate_recycled_level_changes_nothing() {
    let v = synth_weights(SynthModel::Gaussian, 4096, 5);
    let cfg = QuantConfig {
        recycle_enabled: true,
        ..QuantConfig::mxfp(4, 2)
    };
    let sweep = recycled_value_sweep(&v, &cfg, &[RecycleRule::Level(3)]).unwrap();
    assert_eq!(sweep.rows[0].value, -1.5);
    assert_eq!(sweep.rows[0].mse, sweep.baseline_mse);
}

#[test]
fn recycle_sweep_rejects_bad_input() {
    let v = [1.0f32; 8];
    assert!(
        recycled_value_sweep(&v, &QuantConfig::mxfp(4, 2), &[RecycleRule::HalfSmallest]).is_err()
    );
    let cfg = QuantConfig {
        recycle_enabled: true,
        ..QuantConfig::mxfp(4, 2)
    };
    assert!(recycled_value_sweep(&v, &cfg, &[]).is_err());
}

fn brute_block_sse(block: &[f64], scale: f64, levels: &[f64]) -> f64 {
    // Every assignment of codes to the four lanes.
    let n = levels.len();
    let mut best = f64::INFINITY;
    for combo in 0..n.pow(block.len() as u32) {
        let mut c = combo;
        let mut sse = 0.0;
        for &x in block {
            let r = levels[c % n] * scale;
            c /= n;
            sse += (x - r) * (x - r);
        }
        best = best.min(sse);
    }
    best
}

#[test]
fn four_element_remap_matches_brute_force() {
    let block = [-7.1f32, 0.2, -0.1, 4.9];
    let cfg = QuantConfig {
        recycle_enabled: true,
        block_size: 4,
        ..QuantConfig::mxfp(4, 2)
    };
    let candidates = default_recycle_candidates(&cfg).unwrap();
    let sweep = recycled_value_sweep(&block, &cfg, &candidates).unwrap();

    let x: Vec<f64> = block.iter().map(|&v| v as f64).collect();
    let mut best = (f64::INFINITY, 0.0);
    for rule in &candidates {
        let r = match rule {
            RecycleRule::HalfSmallest => E2M1[1] / 2.0,
            RecycleRule::Midpoint(k) => (E2M1[*k as usize] + E2M1[*k as usize + 1]) / 2.0,
            _ => unreachable!(),
        };
        let mut levels: Vec<f64> = E2M1.iter().flat_map(|&l| [l, -l]).collect();
        levels.push(-r);
        let mse = brute_block_sse(&x, 1.0, &levels) / 4.0;
        if mse < best.0 {
            best = (mse, -r);
        }
    }
    assert_eq!(sweep.rows[0].mse, best.0);
    assert_eq!(sweep.rows[0].value, best.1);
}

#[test]
fn block_size_rows() {
    let v = synth_weights(SynthModel::Gaussian, 32_000, 11);
    let rows = block_size_sweep(&v, 4, &DEFAULT_BLOCK_SIZES).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].bpe_nxfp < w[0].bpe_nxfp && w[1].bpe_mxfp < w[0].bpe_mxfp);
    }
    assert!(rows.iter().all(|r| r.bpe_mxfp > 4.0));
    for r in &rows {
        assert!(r.mse_nxfp <= r.mse_mxfp && r.mse_nxfp <= r.mse_bfp, "{r:?}");
    }
    // BFP wins on small blocks, MxFP on large ones.
    assert!(rows[0].mse_bfp < rows[0].mse_mxfp);
    assert!(rows[4].mse_mxfp < rows[4].mse_bfp);
    assert!(block_size_csv(&rows).starts_with("block_size,"));
    assert!(block_size_sweep(&v, 4, &[]).is_err());
}

#[test]
fn microexp_rows() {
    let v = synth_weights(SynthModel::Gaussian, 4096, 2);
    let rows = microexp_config_sweep(&v, 4, 32).unwrap();
    let bits: Vec<u8> = rows.iter().map(|r| r.microexp_bits).collect();
    assert_eq!(bits, vec![0, 1, 2]);
    assert_eq!(rows[2].format, "e2m1");

    let rows = microexp_config_sweep(&v, 6, 32).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.format.as_str()).collect();
    assert!(names.contains(&"e2m3") && names.contains(&"e3m2"));
    let best = rows.iter().map(|r| r.mse).fold(f64::INFINITY, f64::min);
    assert!(rows.iter().all(|r| best <= r.mse));
    assert!(microexp_config_sweep(&v, 9, 32).is_err());
}

#[test]
fn five_bit_default_layout_is_mse_best() {
    let v = synth_weights(SynthModel::Gaussian, 32_000, 4);
    let rows = microexp_config_sweep(&v, 5, 32).unwrap();
    let best = rows.iter().min_by(|a, b| a.mse.total_cmp(&b.mse)).unwrap();
    assert_eq!(best.microexp_bits, QuantConfig::default_microexp_bits(5));
    assert_eq!(best.format, "e2m2");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ablation_monotone_per_block(v in prop::collection::vec(-100.0f32..100.0, 1..300)) {
        let r = ablation_sweep(&v, 4, 32).unwrap();
        let chain: Vec<&Vec<f64>> = ["baseline", "NM", "NM+AM", "NM+AM+CR"]
            .iter()
            .map(|l| &r.row(l).unwrap().block_mse)
            .collect();
        for w in chain.windows(2) {
            for (a, b) in w[0].iter().zip(w[1]) {
                prop_assert!(b <= a);
            }
        }
    }

    #[test]
    fn recycling_never_hurts_a_block(v in prop::collection::vec(-100.0f32..100.0, 1..300)) {
        for base in [QuantConfig::mxfp(4, 2), QuantConfig::bfp(4), QuantConfig::nxfp(5, 2)] {
            let off = evaluate(&v, &QuantConfig { recycle_enabled: false, ..base }).unwrap().block_mse();
            let on = evaluate(&v, &QuantConfig { recycle_enabled: true, ..base }).unwrap().block_mse();
            for (a, b) in off.iter().zip(&on) {
                prop_assert!(b <= a);
            }
        }
    }
}
