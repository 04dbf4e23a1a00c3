//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use evad_cli::{cmd_bench, cmd_flops, cmd_oracle, cmd_run, RunConfig};
use evad_core::costmodel::{flops_total, Component, CostConfig};
use evad_core::encoder::{EncoderConfig, EncoderWeights};
use evad_core::numerics::{softmax_rows, AttentionStats, Matrix};
use evad_core::presets::ModelPreset;
use evad_core::pruning::{
    importance_scores, importance_scores_all, kept_count, select_tokens, PruneConfig, PruneStrategy,
};
use evad_core::refine::{
    extend_box_unclamped, roi_align_3d, run_decoder, scatter_to_grid, DecoderConfig,
    DecoderWeights, FeatureGrid, NormBox, RoiSpec,
};
use evad_core::rng::{seeded, uniform_matrix};
use evad_core::tokenizer::{GridPos, GridShape, TokenSet};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    ((got - want) / want).abs() <= rel
}

fn gflops_grid(resolution: usize, targets: [f64; 5]) -> Outcome {
    let rhos = [1.0, 0.9, 0.8, 0.7, 0.6];
    let reps = cmd_flops(
        ModelPreset::Vitb,
        &rhos,
        &[resolution],
        PruneStrategy::KeyframeGap,
    )
    .map_err(|e| e.to_string())?;
    let mut cells = Vec::new();
    let mut ok = true;
    for ((r, rho), want) in reps.iter().zip(rhos).zip(targets) {
        let dev = (r.total_gflops - want) / want * 100.0;
        ok &= within(r.total_gflops, want, 0.02);
        cells.push(format!(
            "rho={rho}: {:.1} vs {want} ({dev:+.2}%)",
            r.total_gflops
        ));
    }
    let msg = cells.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c1() -> Outcome {
    gflops_grid(224, [223.8, 186.3, 157.0, 134.2, 116.3])
}

fn c2() -> Outcome {
    gflops_grid(288, [424.5, 346.3, 287.4, 242.8, 208.9])
}

fn c3() -> Outcome {
    let mut msgs = Vec::new();
    let mut ok = true;
    for (rho, want) in [(0.7, 409.4), (1.0, 707.9)] {
        let r = flops_total(&CostConfig::vitl(224, rho)).map_err(|e| e.to_string())?;
        ok &= within(r.total_gflops, want, 0.03);
        msgs.push(format!("rho={rho}: {:.1} vs {want}", r.total_gflops));
    }
    let msg = msgs.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4() -> Outcome {
    let r = flops_total(&CostConfig::vitb(224, 1.0)).map_err(|e| e.to_string())?;
    let msg = format!(
        "encoder {:.2} GFLOPs (embed {:.2}, attention {:.2}, ffn {:.2})",
        r.encoder_gflops,
        r.component_gflops(Component::Embed),
        r.component_gflops(Component::Attn),
        r.component_gflops(Component::Ffn)
    );
    if (175.0..=185.0).contains(&r.encoder_gflops) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        preset: ModelPreset::Vitb,
        rho: 0.7,
        prune_layers: Some(vec![4, 7, 10]),
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let s = cmd_run(&cfg).map_err(|e| e.to_string())?;
    let ratio = s.retention();
    let msg = format!(
        "{} -> {:?}, ratio {}/{} = {ratio:.4}",
        s.initial_tokens, s.token_counts, s.final_tokens, s.initial_tokens
    );
    if (0.335..=0.350).contains(&ratio) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6() -> Outcome {
    let mut r = seeded(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (r.gen_range(0.01..0.9), r.gen_range(0.01..0.9));
        let (x1, y1) = (r.gen_range(0.0..1.0 - w), r.gen_range(0.0..1.0 - h));
        let b = NormBox::new(x1, y1, x1 + w, y1 + h);
        let e = extend_box_unclamped(b, 0.4, 0.2).map_err(|e| e.to_string())?;
        worst = worst.max((e.area() / b.area() - 1.68).abs());
    }
    let msg = format!("1000 boxes, max |ratio - 1.68| = {worst:e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c7() -> Outcome {
    let rep = cmd_oracle(100, false).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} seeds, max relative deviation {:e}",
        rep.seeds, rep.max_deviation
    ))
}

// ---- invariant suite ----

const CASES: u32 = 100;

fn rand_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    uniform_matrix(&mut seeded(seed), rows, cols, scale)
}

fn rand_attention(seed: u64, n: usize) -> AttentionStats<f64> {
    AttentionStats {
        attn: softmax_rows(&rand_matrix(seed, n, n, 3.0)),
    }
}

fn small_grid() -> impl Strategy<Value = GridShape> {
    (1usize..5, 1usize..4, 1usize..4).prop_map(|(t, h, w)| GridShape::new(t, h, w))
}

fn check(
    name: &str,
    result: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>,
    failures: &mut Vec<String>,
) -> u32 {
    if let Err(e) = result {
        failures.push(format!("{name}: {e}"));
    }
    CASES
}

fn c8() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let mut failures = Vec::new();
    let mut total = 0;

    // Keyframe tokens survive every pruning, and each pruning keeps floor(N rho).
    let r = runner.run(
        &((3usize..6, 1usize..4, 1usize..4), any::<u64>(), 70u32..96),
        |((t, h, w), seed, pct)| {
            let grid = GridShape::new(t, h, w);
            let rho = f64::from(pct) / 100.0;
            let cfg = EncoderConfig::new(4, 8, 2, PruneConfig::new(rho, 1.5).unwrap())
                .unwrap()
                .with_prune_layers(vec![1, 2])
                .unwrap();
            let key_t = t / 2;
            prop_assume!(cfg.token_schedule(grid.len(), grid.slice_len()).is_ok());
            let ts = TokenSet::dense(rand_matrix(seed, grid.len(), 8, 1.0), grid, key_t).unwrap();
            let wts = EncoderWeights::random(seed ^ 1, 4, 8, 2, 0.3);
            let out = evad_core::encoder::run_encoder(&ts, &cfg, &wts).unwrap();
            let mut n = grid.len();
            for rec in &out.prune_trace {
                let kept: BTreeSet<GridPos> = rec.kept_positions.iter().copied().collect();
                for h in 0..grid.h {
                    for w in 0..grid.w {
                        prop_assert!(kept.contains(&GridPos::new(key_t, h, w)));
                    }
                }
                n = n * pct as usize / 100;
                prop_assert_eq!(rec.tokens_after(), n);
            }
            for tap in &out.keyframe_taps {
                prop_assert_eq!(tap.features.rows(), grid.slice_len());
            }
            Ok(())
        },
    );
    total += check("keyframe preservation", r, &mut failures);

    // rho = 1 leaves the layer stack untouched.
    let r = runner.run(&(small_grid(), any::<u64>()), |(grid, seed)| {
        let cfg = EncoderConfig::new(4, 8, 2, PruneConfig::new(1.0, 2.0).unwrap())
            .unwrap()
            .with_prune_layers(vec![1, 2, 3])
            .unwrap();
        let ts = TokenSet::dense(rand_matrix(seed, grid.len(), 8, 1.0), grid, 0).unwrap();
        let wts = EncoderWeights::random(seed ^ 2, 4, 8, 2, 0.3);
        let out = evad_core::encoder::run_encoder(&ts, &cfg, &wts).unwrap();
        let mut x = ts.values().clone();
        for layer in &wts.layers {
            x = layer.forward(&x).unwrap();
        }
        let x = wts.final_norm.forward(&x).unwrap();
        prop_assert_eq!(out.tokens.positions(), ts.positions());
        prop_assert!(out.tokens.values().max_abs_diff(&x) <= 1e-12);
        Ok(())
    });
    total += check("rho=1 identity", r, &mut failures);

    // kept count equals the integer floor of N * k / 100.
    let r = runner.run(&(1usize..5000, 1usize..=100), |(n, k)| {
        prop_assert_eq!(kept_count(n, k as f64 / 100.0), n * k / 100);
        Ok(())
    });
    total += check("count law", r, &mut failures);

    let r = runner.run(
        &(1usize..12, 1usize..12, any::<u64>()),
        |(rows, cols, seed)| {
            let s = softmax_rows(&rand_matrix(seed, rows, cols, 50.0));
            for row in s.iter_rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
            Ok(())
        },
    );
    total += check("softmax rows", r, &mut failures);

    // Total score mass is (w N1 + N2) / N.
    let r = runner.run(
        &(2usize..20, any::<u64>(), 1.0f64..4.0, any::<u64>()),
        |(n, seed, w, mask_bits)| {
            let attn = rand_attention(seed, n);
            let key: Vec<usize> = (0..n).filter(|i| mask_bits >> (i % 64) & 1 == 1).collect();
            let s = importance_scores_all(&attn, &key, w).unwrap();
            let n1 = key.len() as f64;
            let want = (w * n1 + (n as f64 - n1)) / n as f64;
            let got: f64 = s.scores.iter().sum();
            prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
            Ok(())
        },
    );
    total += check("weighted mass identity", r, &mut failures);

    let r = runner.run(&(2usize..20, any::<u64>()), |(n, seed)| {
        let attn = rand_attention(seed, n);
        let key: Vec<usize> = (0..n).step_by(3).collect();
        let s = importance_scores(&attn, &key, 1.0).unwrap();
        for (&j, &got) in s.ids.iter().zip(&s.scores) {
            let mean = (0..n).map(|i| attn.attn.get(i, j)).sum::<f64>() / n as f64;
            prop_assert!((got - mean).abs() <= 1e-15);
        }
        Ok(())
    });
    total += check("unit weight column mean", r, &mut failures);

    // Equal scores resolve to the lower token index.
    let r = runner.run(
        &(4usize..24, prop::collection::vec(1u8..4, 24), 60u32..100),
        |(n, levels, pct)| {
            let row: Vec<f64> = levels[..n].iter().map(|&l| f64::from(l)).collect();
            let total: f64 = row.iter().sum();
            let row: Vec<f64> = row.iter().map(|v| v / total).collect();
            let attn = AttentionStats {
                attn: Matrix::from_rows(&vec![row.clone(); n]).unwrap(),
            };
            let key = vec![0];
            let rho = f64::from(pct) / 100.0;
            prop_assume!(kept_count(n, rho) > 1);
            let scores = importance_scores(&attn, &key, 1.0).unwrap();
            let got = select_tokens(&scores, n, 1, rho).unwrap();
            let mut order: Vec<usize> = (1..n).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut want = order[..kept_count(n, rho) - 1].to_vec();
            want.sort_unstable();
            let mut got = got;
            got.sort_unstable();
            prop_assert_eq!(got, want);
            Ok(())
        },
    );
    total += check("tie-break stability", r, &mut failures);

    let r = runner.run(
        &(small_grid(), any::<u64>(), any::<u64>()),
        |(grid, seed, bits)| {
            let pos: Vec<GridPos> = grid
                .iter()
                .filter(|p| bits >> (grid.flat(*p) % 64) & 1 == 1)
                .collect();
            let v = rand_matrix(seed, pos.len(), 5, 1.0);
            let ts = TokenSet::new(v.clone(), pos.clone(), grid, 0).unwrap();
            let g = scatter_to_grid(&ts).unwrap();
            prop_assert_eq!(g.gather(&pos), v);
            for p in grid.iter() {
                if !pos.contains(&p) {
                    prop_assert!(g.cell(p).iter().all(|&x| x == 0.0));
                }
            }
            Ok(())
        },
    );
    total += check("scatter/gather round trip", r, &mut failures);

    let boxes = (0.0f64..0.8, 0.0f64..0.8, 0.05f64..0.2, 0.05f64..0.2)
        .prop_map(|(x, y, w, h)| NormBox::new(x, y, x + w, y + h));
    let r = runner.run(
        &(
            small_grid(),
            boxes.clone(),
            -5.0f64..5.0,
            0.0f64..0.5,
            0.0f64..0.5,
        ),
        |(grid, b, c, ex, ey)| {
            let g = FeatureGrid::constant(grid, 3, c);
            let roi = RoiSpec::new(b).with_extension(ex, ey);
            for v in roi_align_3d(&g, &roi).unwrap() {
                prop_assert!((v - c).abs() <= 1e-12);
            }
            Ok(())
        },
    );
    total += check("RoIAlign constant map", r, &mut failures);

    let r = runner.run(
        &(small_grid(), boxes, any::<u64>(), -3.0f64..3.0),
        |(grid, b, seed, a)| {
            let f = FeatureGrid::from_dense(grid, &rand_matrix(seed, grid.len(), 4, 1.0)).unwrap();
            let g =
                FeatureGrid::from_dense(grid, &rand_matrix(seed ^ 7, grid.len(), 4, 1.0)).unwrap();
            let roi = RoiSpec::new(b);
            let lhs = roi_align_3d(&f.axpy(a, &g).unwrap(), &roi).unwrap();
            let rf = roi_align_3d(&f, &roi).unwrap();
            let rg = roi_align_3d(&g, &roi).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * rf[i] + rg[i])).abs() <= 1e-12);
            }
            Ok(())
        },
    );
    total += check("RoIAlign linearity", r, &mut failures);

    let r = runner.run(
        &(1usize..4, 1usize..10, any::<u64>(), any::<u64>()),
        |(n, m, seed, perm_seed)| {
            let cfg = DecoderConfig {
                dim: 8,
                depth: 2,
                heads: 2,
                queries: 100,
            };
            let w = DecoderWeights::random(seed, 6, &cfg, 0.3);
            let actors = rand_matrix(seed ^ 3, n, 6, 1.0);
            let grid = GridShape::new(1, 1, m);
            let ctx_vals = rand_matrix(seed ^ 4, m, 6, 1.0);
            let ctx = TokenSet::dense(ctx_vals.clone(), grid, 0).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            let mut pr = seeded(perm_seed);
            for i in (1..m).rev() {
                perm.swap(i, pr.gen_range(0..=i));
            }
            let shuffled = TokenSet::dense(ctx_vals.select_rows(&perm), grid, 0).unwrap();
            let a = run_decoder(&actors, &ctx, &cfg, &w).unwrap();
            let b = run_decoder(&actors, &shuffled, &cfg, &w).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-10);
            Ok(())
        },
    );
    total += check("decoder context permutation", r, &mut failures);

    if failures.is_empty() {
        Ok(format!("{total} cases across 11 properties"))
    } else {
        Err(failures.join(" | "))
    }
}

fn c9() -> Outcome {
    let cfg = RunConfig {
        preset: ModelPreset::Tiny,
        ..RunConfig::default()
    };
    let rep = cmd_bench(&cfg, &[1.0, 0.7, 0.5], 21).map_err(|e| e.to_string())?;
    let medians: Vec<f64> = rep.rows.iter().map(|r| r.median_ms).collect();
    let msg = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "rho={}: {:.3} ms, tokens {:?}",
                r.rho, r.median_ms, r.token_counts
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    if medians.windows(2).all(|w| w[1] < w[0]) && !rep.low_confidence {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("masks")] {
        let mut names: Vec<_> = fs::read_dir(&sub)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            out.push((rel, fs::read(&p).unwrap()));
        }
    }
    out
}

fn c10() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = RunConfig {
        preset: ModelPreset::Tiny,
        rho: 0.7,
        seed: 11,
        ..RunConfig::default()
    };
    for dir in [&a, &b] {
        cmd_run(&RunConfig {
            out: dir.path().to_path_buf(),
            ..base.clone()
        })
        .map_err(|e| e.to_string())?;
    }
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let masks = ta.iter().filter(|(n, _)| n.ends_with(".pgm")).count();
    let msg = format!("{} files compared ({masks} masks)", ta.len());
    if ta == tb && masks > 0 && ta.iter().any(|(n, _)| n == "trace.json") {
        Ok(msg)
    } else {
        Err(format!("outputs differ: {msg}"))
    }
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "GFLOPs at 224",
            budget: Duration::from_secs(1),
            run: c1,
        },
        Criterion {
            id: 2,
            name: "GFLOPs at 288",
            budget: Duration::from_secs(1),
            run: c2,
        },
        Criterion {
            id: 3,
            name: "ViT-L GFLOPs",
            budget: Duration::from_secs(1),
            run: c3,
        },
        Criterion {
            id: 4,
            name: "encoder-only cost",
            budget: Duration::from_secs(1),
            run: c4,
        },
        Criterion {
            id: 5,
            name: "token retention ratio",
            budget: Duration::from_secs(30),
            run: c5,
        },
        Criterion {
            id: 6,
            name: "RoI extension area law",
            budget: Duration::from_secs(1),
            run: c6,
        },
        Criterion {
            id: 7,
            name: "oracle equivalence",
            budget: Duration::from_secs(60),
            run: c7,
        },
        Criterion {
            id: 8,
            name: "invariant suite",
            budget: Duration::from_secs(120),
            run: c8,
        },
        Criterion {
            id: 9,
            name: "bench trend on tiny",
            budget: Duration::from_secs(60),
            run: c9,
        },
        Criterion {
            id: 10,
            name: "determinism",
            budget: Duration::from_secs(30),
            run: c10,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        let label = format!("{:02} {}", c.id, c.name);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let res = (c.run)();
        let dt = t0.elapsed();
        let (ok, detail) = match res {
            Ok(m) if dt <= c.budget => (true, m),
            Ok(m) => (false, format!("{m} [over budget {:?}]", c.budget)),
            Err(m) => (false, m),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {label} ({:.2}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            dt.as_secs_f64()
        );
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
