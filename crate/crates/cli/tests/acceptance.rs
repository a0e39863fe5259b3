//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! output. The process fails when any criterion outside
//! [`KNOWN_FAILURES`] fails; known failures are still reported as FAIL.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use adp_core::ablation::{run_ablation, AblationArms};
use adp_core::checkpoint::{read_checkpoint, save_checkpoint};
use adp_core::config::RunConfig;
use adp_core::model::build_branched_model;
use adp_core::run::train_model;
use adp_core::schedules::{main_lr_at, pmoc_lr_at};
use adp_core::selftest::{self, CheckOutcome, DCML_ORACLE_CHECK};

/// Criteria measured to fail at desk scale. The second clause of the
/// ablation criterion (DCML on ≥ DCML off in 3 of 5 seeds) scores 2 of 5
/// with the shipped settings; it is reported, not relaxed.
const KNOWN_FAILURES: &[u32] = &[6];

struct Verdict {
    criterion: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn from_checks(criterion: u32, title: &'static str, checks: Vec<CheckOutcome>) -> Verdict {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict {
        criterion,
        title,
        passed,
        detail,
    }
}

fn adp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("adp binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("unparsable value {s:?}"))
}

fn criterion_1() -> Verdict {
    from_checks(
        1,
        "schedule reproduction",
        vec![selftest::check_schedule_closed_forms()],
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut v = from_checks(
        2,
        "gradient fidelity",
        vec![
            selftest::check_gradient_dymain(21),
            selftest::check_gradient_dcml(22),
            selftest::check_gradient_cross_entropy(23),
            selftest::check_gradient_triplet(24),
            selftest::check_gradient_total(25),
        ],
    );
    let secs = start.elapsed().as_secs_f64();
    v.passed &= secs < 60.0;
    v.detail.push_str(&format!("; {secs:.2}s"));
    v
}

fn criterion_3() -> Verdict {
    from_checks(
        3,
        "normalization reductions",
        vec![selftest::check_normalization_reductions(11, 100)],
    )
}

fn criterion_4() -> Verdict {
    from_checks(
        4,
        "oracle equivalence",
        vec![
            selftest::check_match_oracle(31, 100),
            selftest::check_dcml_oracle(32, 100),
            selftest::check_retrieval_oracle(33, 200),
            selftest::check_triplet_oracle(34, 500),
        ],
    )
}

fn criterion_5() -> Verdict {
    from_checks(
        5,
        "clone symmetry",
        vec![selftest::check_clone_symmetry(41)],
    )
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let arms = AblationArms::from_base(RunConfig::desk()).expect("desk preset is valid");
    let results = run_ablation(&arms, 0..5);
    let secs = start.elapsed().as_secs_f64();
    let wins_base = results.iter().filter(|r| r.full_beats_baseline()).count();
    let wins_dcml = results.iter().filter(|r| r.dcml_helps()).count();
    let per_seed = results
        .iter()
        .map(|r| {
            format!(
                "seed {}: full {:.3} / baseline {:.3} / w3=0 {:.3}",
                r.seed, r.full.rank1, r.baseline.rank1, r.no_dcml.rank1
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let errors: Vec<String> = results
        .iter()
        .flat_map(|r| [&r.full, &r.baseline, &r.no_dcml].map(|a| a.error.clone()))
        .flatten()
        .collect();
    Verdict {
        criterion: 6,
        title: "desk-scale ablation direction",
        passed: wins_base >= 4 && wins_dcml >= 3 && secs < 600.0,
        detail: format!(
            "full >= baseline {wins_base}/5 (need 4); w3=0.01 >= w3=0 {wins_dcml}/5 (need 3); \
             {secs:.1}s; {per_seed}{}",
            if errors.is_empty() {
                String::new()
            } else {
                format!("; errors: {}", errors.join(" | "))
            }
        ),
    }
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let result = (|| -> Result<String, String> {
        let mut notes = Vec::new();

        let clean = adp(&["selftest"], dir.path());
        if !clean.status.success() {
            return Err(format!(
                "selftest exited {:?}:\n{}",
                clean.status.code(),
                stdout(&clean)
            ));
        }
        notes.push("selftest exit 0".to_string());

        let corrupt = adp(&["selftest", "--corrupt-chebyshev"], dir.path());
        let stderr = String::from_utf8_lossy(&corrupt.stderr);
        if corrupt.status.success() || !stderr.contains(DCML_ORACLE_CHECK) {
            return Err(format!(
                "corrupted selftest: {:?}, {stderr}",
                corrupt.status.code()
            ));
        }
        notes.push("corrupted Chebyshev fails the DCML oracle".to_string());

        let sched = adp(
            &["schedule", "--paper-defaults", "--out", "sched"],
            dir.path(),
        );
        if !sched.status.success() {
            return Err(format!("schedule exited {:?}", sched.status.code()));
        }
        let config = RunConfig::full_size();
        let (main, branches) = (config.main_schedule(), config.branch_specs());
        let rows = csv_rows(&dir.path().join("sched/schedule.csv"))?;
        if rows.len() != config.schedules.epochs {
            return Err(format!("schedule CSV has {} rows", rows.len()));
        }
        let mut worst: f64 = 0.0;
        for row in &rows {
            let epoch: usize = row[0].parse().map_err(|_| "bad epoch".to_string())?;
            let mut expect = vec![main_lr_at(&main, epoch).map_err(|e| e.to_string())?];
            for b in &branches {
                expect.push(pmoc_lr_at(b, epoch).map_err(|e| e.to_string())?);
            }
            for (cell, want) in row[1..].iter().zip(&expect) {
                worst = worst.max((parse(cell)? - want).abs());
            }
        }
        if worst > 1e-9 {
            return Err(format!("schedule CSV off by {worst:e}"));
        }
        notes.push(format!("schedule CSV max error {worst:.1e}"));

        let train = adp(&["train", "--out", "train"], dir.path());
        if !train.status.success() {
            return Err(format!("train exited {:?}", train.status.code()));
        }
        let mut desk = RunConfig::desk();
        desk.io.out_dir = dir.path().join("train");
        let schedules = desk.train_schedules();
        for row in csv_rows(&dir.path().join("train/metrics.csv"))? {
            let epoch: usize = row[0].parse().map_err(|_| "bad epoch".to_string())?;
            let rates = schedules.rates_at(epoch).map_err(|e| e.to_string())?;
            let logged: Vec<f64> = row[5..]
                .iter()
                .map(|c| parse(c))
                .collect::<Result<_, _>>()?;
            let mut expect = vec![rates.main];
            expect.extend(&rates.branches);
            if logged != expect {
                return Err(format!(
                    "epoch {epoch}: logged {logged:?}, schedule {expect:?}"
                ));
            }
        }
        notes.push("logged rates identical".to_string());

        let ckpt = dir.path().join("train/model.ckpt");
        let saved = read_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        let (reference, _) = train_model(&desk, |_| {}).map_err(|e| e.to_string())?;
        let mut fresh = build_branched_model(desk.model_config(), desk.model.seed + 1)
            .map_err(|e| e.to_string())?;
        fresh
            .params_mut()
            .load(saved.clone())
            .map_err(|e| e.to_string())?;
        let bits =
            |it: &mut dyn Iterator<Item = (&str, &adp_core::Tensor)>| -> Vec<(String, Vec<u64>)> {
                it.map(|(n, t)| {
                    (
                        n.to_string(),
                        t.data().iter().map(|v| v.to_bits()).collect(),
                    )
                })
                .collect()
            };
        let from_file = bits(&mut saved.iter().map(|(n, t)| (n.as_str(), t)));
        if from_file != bits(&mut reference.params().iter())
            || from_file != bits(&mut fresh.params().iter())
        {
            return Err("checkpoint values differ from the trained parameters".into());
        }
        let resaved = dir.path().join("resaved.ckpt");
        save_checkpoint(&resaved, fresh.params()).map_err(|e| e.to_string())?;
        if std::fs::read(&ckpt).ok() != std::fs::read(&resaved).ok() {
            return Err("re-saved checkpoint is not byte-identical".into());
        }
        notes.push(format!(
            "checkpoint round trip bit-exact over {} tensors",
            saved.len()
        ));
        Ok(notes.join("; "))
    })();
    let passed = result.is_ok();
    Verdict {
        criterion: 7,
        title: "CLI contract",
        passed,
        detail: result.unwrap_or_else(|e| e),
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments through; this target has no
    // individual tests to select, so they are ignored.
    let start = Instant::now();
    let verdicts = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
    ];
    for v in &verdicts {
        let status = if v.passed { "PASS" } else { "FAIL" };
        let known = if !v.passed && KNOWN_FAILURES.contains(&v.criterion) {
            " [known failure]"
        } else {
            ""
        };
        println!(
            "criterion {} {status}{known}: {} — {}",
            v.criterion, v.title, v.detail
        );
    }
    let unexpected: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.passed && !KNOWN_FAILURES.contains(&v.criterion))
        .map(|v| v.criterion)
        .collect();
    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!(
        "{passed}/{} criteria pass ({:.1}s)",
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
