//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use half::f16;
use nxfp::analysis::*;
use nxfp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, u64, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Minifloat magnitude of code `c` written out from the format definition.
fn minifloat(e: u32, m: u32, c: u32) -> f64 {
    if e == 0 {
        return c as f64;
    }
    let bias = if e >= 2 { (1i32 << (e - 1)) - 1 } else { 0 };
    let (ef, mf) = (
        (c >> m) as i32,
        (c & ((1 << m) - 1)) as f64 / (1u32 << m) as f64,
    );
    if ef == 0 {
        mf * 2f64.powi(1 - bias)
    } else {
        (1.0 + mf) * 2f64.powi(ef - bias)
    }
}

fn worked_example() -> Outcome {
    let block = [-7.4f32, 0.625, 1.25, 2.5, -3.75, 5.0, 1.875, 0.0];
    let decode = |cfg: QuantConfig| {
        let q = quantize_block(&block, &cfg).unwrap();
        let d = dequantize_block(&q.scale, &q.codes, &cfg, DequantTarget::Binary32).unwrap();
        (q.scale.nano_factor(), d[0] as f64)
    };
    let (nx_scale, nx) = decode(QuantConfig::nxfp(4, 2));
    let (nm_scale, nm) = decode(QuantConfig {
        nano_enabled: true,
        ..QuantConfig::mxfp(4, 2)
    });
    let (_, mx) = decode(QuantConfig::mxfp(4, 2));
    let tol = 1e-6;
    let ok = (nx_scale - 1.25).abs() < tol
        && (nm_scale - 1.25).abs() < tol
        && (nx + 7.5).abs() < tol
        && (nm + 7.5).abs() < tol
        && ((nx + 7.4).abs() - 0.1).abs() < tol
        && (mx + 6.0).abs() < tol
        && ((mx + 7.4).abs() - 1.4).abs() < tol;
    check(
        ok,
        format!("nxfp4 scale {nx_scale} -> {nx}, mxfp4+nm -> {nm}, mxfp4 -> {mx}"),
    )
}

fn level_tables() -> Outcome {
    let e2m1: Vec<f64> = LevelTable::new(ElementFormat::new(2, 1).unwrap())
        .magnitudes()
        .to_vec();
    let mut ok = e2m1 == [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
    for (e, m) in [(2u8, 3u8), (3, 2)] {
        let table = LevelTable::new(ElementFormat::new(e, m).unwrap());
        let oracle: Vec<f64> = (0..1u32 << (e + m))
            .map(|c| minifloat(e as u32, m as u32, c))
            .collect();
        ok &= table.magnitudes() == oracle.as_slice();
    }
    check(ok, format!("e2m1 {e2m1:?}"))
}

fn gaussian_corpus() -> Vec<f32> {
    synth_weights(SynthModel::Gaussian, 10_000 * 32, 20_251)
}

fn ablation(values: &[f32]) -> Outcome {
    let r = ablation_sweep(values, 4, 32).map_err(|e| e.to_string())?;
    let chain: Vec<&ErrorRow> = ["baseline", "NM", "NM+AM", "NM+AM+CR"]
        .iter()
        .map(|l| r.row(l).unwrap())
        .collect();
    let violations: usize = chain
        .windows(2)
        .map(|w| {
            w[0].block_mse
                .iter()
                .zip(&w[1].block_mse)
                .filter(|(a, b)| b > a)
                .count()
        })
        .sum();
    let reduction = chain[3].reduction;
    check(
        violations == 0 && reduction >= 0.05,
        format!(
            "per-block violations {violations}, mse {:.6} -> {:.6} -> {:.6} -> {:.6}, reduction {:.1}%",
            chain[0].mse,
            chain[1].mse,
            chain[2].mse,
            chain[3].mse,
            100.0 * reduction
        ),
    )
}

fn dominance(values: &[f32]) -> Outcome {
    let rows = block_size_sweep(values, 4, &DEFAULT_BLOCK_SIZES).map_err(|e| e.to_string())?;
    let bad: Vec<usize> = rows
        .iter()
        .filter(|r| r.mse_nxfp > r.mse_mxfp.min(r.mse_bfp))
        .map(|r| r.block_size)
        .collect();
    let detail: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "bs{} {:.5}/{:.5}/{:.5}",
                r.block_size, r.mse_nxfp, r.mse_mxfp, r.mse_bfp
            )
        })
        .collect();
    check(bad.is_empty(), format!("nx/mx/bfp {}", detail.join(", ")))
}

fn recycled_value(values: &[f32]) -> Outcome {
    let cfg = QuantConfig {
        recycle_enabled: true,
        ..QuantConfig::mxfp(4, 2)
    };
    let candidates = default_recycle_candidates(&cfg).map_err(|e| e.to_string())?;
    let sweep = recycled_value_sweep(values, &cfg, &candidates).map_err(|e| e.to_string())?;
    let rank = sweep.rank_of(RecycleRule::HalfSmallest).unwrap();
    let order: Vec<String> = sweep
        .rows
        .iter()
        .map(|r| format!("{}({})", r.value, r.rule))
        .collect();
    check(
        rank < 2,
        format!(
            "half-smallest rank {} of {}; order {}",
            rank + 1,
            sweep.rows.len(),
            order.join(" ")
        ),
    )
}

fn adaptive_selection() -> Outcome {
    let v = synth_weights(SynthModel::ClusteredScatteredPairs, 200 * 32, 7);
    let ev = evaluate(&v, &QuantConfig::nxfp(4, 2)).map_err(|e| e.to_string())?;
    let (mut clustered_bfp, mut scattered_mx, mut half) = (0usize, 0usize, 0usize);
    for (k, b) in ev.blocks.iter().enumerate() {
        if k % 2 == 0 {
            half += 1;
            clustered_bfp += (b.scale.fmt == ElementKind::Bfp) as usize;
        } else {
            scattered_mx += (b.scale.fmt == ElementKind::Mx) as usize;
        }
    }
    let scattered = ev.blocks.len() - half;
    check(
        2 * clustered_bfp > half && 2 * scattered_mx > scattered,
        format!(
            "clustered->BFP {clustered_bfp}/{half}, scattered->MxFP {scattered_mx}/{scattered}"
        ),
    )
}

fn round_trip() -> Outcome {
    let configs = [
        QuantConfig::bfp(4),
        QuantConfig::mxfp(4, 2),
        QuantConfig::nxfp(4, 2),
        QuantConfig::nxfp(5, 2),
        QuantConfig::mxfp(6, 2),
        QuantConfig::mxfp(6, 3),
        QuantConfig::nxfp(6, 2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    for cfg in configs {
        let mut bad = 0;
        for _ in 0..1000 {
            let n = rng.random_range(1..=256usize);
            let sigma = 2f32.powi(rng.random_range(-8..8));
            let v: Vec<f32> = (0..n)
                .map(|_| f16::from_f32(rng.sample::<f32, _>(StandardNormal) * sigma).to_f32())
                .collect();
            let p = quantize_tensor(&v, &[n], &cfg).unwrap();
            let d = dequantize_tensor(&p, DequantTarget::Binary32).unwrap();
            let p2 = quantize_tensor(d.data(), &[n], &cfg).unwrap();
            let bytes = p.serialize();
            let same_io =
                PackedTensor::deserialize(&bytes).map(|q| q == p && q.serialize() == bytes);
            if p2 != p || p2.serialize() != bytes || !matches!(same_io, Ok(true)) {
                bad += 1;
            }
        }
        if bad > 0 {
            failures.push(format!("{cfg}: {bad}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "7 configs x 1000 vectors bit-identical".into()
        } else {
            format!("non-identical vectors {}", failures.join(", "))
        },
    )
}

fn footprint() -> Outcome {
    let mx = footprint_bits_per_element(&QuantConfig::mxfp(4, 2));
    let nx = footprint_bits_per_element(&QuantConfig::nxfp(4, 2));
    let ratio = footprint_bits_per_element(&QuantConfig::nxfp(5, 2))
        / footprint_bits_per_element(&QuantConfig::mxfp(6, 2));
    let mut ok =
        mx == 4.25 && nx == 4.34375 && ratio == 5.34375 / 6.25 && (ratio - 0.855).abs() < 5e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for cfg in [
        QuantConfig::mxfp(4, 2),
        QuantConfig::nxfp(4, 2),
        QuantConfig::nxfp(5, 2),
        QuantConfig::mxfp(6, 2),
    ] {
        for n in [32usize, 1000, 4096, 12_345] {
            let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let bytes = quantize_tensor(&v, &[n], &cfg).unwrap().serialize();
            let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as f64;
            let data_bits = (bytes.len() as f64 - 12.0 - header_len) * 8.0;
            let blocks = n.div_ceil(32) as f64;
            let formula = footprint_bits_per_element(&cfg) * blocks * 32.0;
            ok &= data_bits >= formula && data_bits < formula + 16.0;
        }
    }
    check(
        ok,
        format!("mxfp4 {mx}, nxfp4 {nx}, nxfp5/mxfp6 {ratio:.5}"),
    )
}

// Exhaustive search over (m, element format, code per lane). The squared error
// is separable, so scanning every code per lane covers every assignment.
fn oracle_mse(block: &[f32]) -> f64 {
    let vmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    if vmax == 0.0 {
        return 0.0;
    }
    let e = vmax.log2().floor() as i32;
    let mut best = f64::INFINITY;
    for (eb, mb) in [(2u32, 1u32), (0, 3)] {
        let mags: Vec<f64> = (0..8).map(|c| minifloat(eb, mb, c)).collect();
        let emax = mags[7].log2().floor() as i32;
        let mut levels: Vec<f64> = mags.iter().flat_map(|&l| [l, -l]).collect();
        levels.push(-mags[1] / 2.0);
        for m in 0..4 {
            let scale = (1.0 + m as f64 / 4.0) * 2f64.powi(e - emax);
            let sse: f64 = block
                .iter()
                .map(|&x| {
                    levels
                        .iter()
                        .map(|&l| (x as f64 - l * scale).powi(2))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            best = best.min(sse / block.len() as f64);
        }
    }
    best
}

fn brute_force_oracle() -> Outcome {
    let cfg = QuantConfig::nxfp(4, 2).with_block_size(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = Vec::new();
    for i in 0..200 {
        let n = rng.random_range(1..=8);
        // Multiples of 2^-10 keep every error term and sum exact in f64.
        let block: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-8192i32..=8192) as f32 / 1024.0)
            .collect();
        let got = quantize_block(&block, &cfg).unwrap().report.mse;
        let want = oracle_mse(&block);
        if got != want {
            mismatches.push(format!("#{i} {got:.6} vs {want:.6}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!(
            "{} of 200 blocks differ from the exhaustive minimum {}",
            mismatches.len(),
            mismatches.join("; ")
        ),
    )
}

fn reference_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn gemm_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let configs = [
        QuantConfig::nxfp(4, 2),
        QuantConfig::mxfp(4, 2),
        QuantConfig::nxfp(6, 2).with_block_size(16),
    ];
    let mut bad = 0;
    for case in 0..50 {
        let cfg = configs[case % configs.len()];
        let target = [
            DequantTarget::Binary32,
            DequantTarget::Binary16,
            DequantTarget::BFloat16,
        ][case % 3];
        let a: Vec<f32> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f32> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let pa = quantize_tensor(&a, &[16, 16], &cfg).unwrap();
        let da = dequantize_tensor(&pa, target).unwrap();
        let (got, rhs) = if case % 2 == 0 {
            let tb = Tensor::new(vec![16, 16], b).unwrap();
            (gemm_dequant(&pa, Operand::Dense(&tb), target).unwrap(), tb)
        } else {
            let pb = quantize_tensor(&b, &[16, 16], &cfg).unwrap();
            let db = dequantize_tensor(&pb, target).unwrap();
            (gemm_dequant(&pa, Operand::Packed(&pb), target).unwrap(), db)
        };
        let want = reference_matmul(da.data(), rhs.data(), 16, 16, 16);
        let same = got.shape() == [16, 16]
            && got
                .data()
                .iter()
                .zip(&want)
                .all(|(x, y)| x.to_bits() == y.to_bits());
        bad += !same as usize;
    }
    check(bad == 0, format!("{bad} of 50 cases differ"))
}

fn main() -> ExitCode {
    let corpus = gaussian_corpus();
    let criteria: Vec<Criterion> = vec![
        ("1 worked NanoMantissa example", 1, Box::new(worked_example)),
        ("2 level-table oracle", 1, Box::new(level_tables)),
        (
            "3 ablation monotonicity",
            30,
            Box::new(|| ablation(&corpus)),
        ),
        (
            "4 format dominance across block sizes",
            60,
            Box::new(|| dominance(&corpus)),
        ),
        (
            "5 recycled-value sweep",
            30,
            Box::new(|| recycled_value(&corpus)),
        ),
        (
            "6 adaptive format selection",
            10,
            Box::new(adaptive_selection),
        ),
        ("7 round trip and idempotence", 60, Box::new(round_trip)),
        ("8 footprint arithmetic", 1, Box::new(footprint)),
        (
            "9 small-instance brute-force oracle",
            60,
            Box::new(brute_force_oracle),
        ),
        ("10 gemm equivalence", 10, Box::new(gemm_equivalence)),
    ];
    let mut failed = 0;
    for (name, limit, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed < Duration::from_secs(*limit);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += !pass as usize;
        println!(
            "{} criterion {name}: {detail} [{:.2}s, limit {limit}s{}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
