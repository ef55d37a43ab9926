use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn declutter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_declutter"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "sim.height = 32\nsim.width = 32\nsim.frames = 8\n";

#[test]
fn simulate_nf_gives_one_record_per_pattern() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("data");
    let args = ["simulate", "--class", "nf", "--limit", "18", "--seed", "5"];
    let o = declutter(&[&args[..], &["--config", s(&cfg), "--out", s(&out)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("config digest: "));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    let ids: Vec<usize> = manifest
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ids, (0..18).collect::<Vec<_>>());

    let again = declutter(&[&args[..], &["--config", s(&cfg), "--out", s(&out)]].concat());
    assert_eq!(code(&again), 2);
    let forced = declutter(
        &[
            &args[..],
            &["--config", s(&cfg), "--out", s(&out), "--force"],
        ]
        .concat(),
    );
    assert_eq!(code(&forced), 0);
    assert_eq!(
        fs::read_to_string(out.join("manifest.tsv")).unwrap(),
        manifest
    );
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(
        code(&declutter(&["simulate", "--class", "xx", "--out", s(&out)])),
        1
    );
    assert_eq!(code(&declutter(&["simulate", "--bogus"])), 1);
    assert_eq!(code(&declutter(&["simulate"])), 1);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "sim.colour = red\n").unwrap();
    assert_eq!(code(&declutter(&["verify", "--config", s(&cfg)])), 1);
    assert_eq!(code(&declutter(&["filter", "--manifest", "m"])), 1);
    assert_eq!(code(&declutter(&["--help"])), 0);
}

#[test]
fn svd_filter_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    let c = ["--config", s(&cfg)];
    let o = declutter(&[&["simulate", "--limit", "6", "--out", s(&data)], &c[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds = tmp.path().join("svd");
    let o = declutter(
        &[
            &[
                "filter",
                "--manifest",
                s(&data),
                "--svd",
                "--roi",
                "4",
                "--drop",
                "2",
            ],
            &["--out", s(&preds), "--split", "val"][..],
            &c[..],
        ]
        .concat(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(preds.join("timings.json").is_file());

    let report = tmp.path().join("report.json");
    let eval = [
        &["eval", "--manifest", s(&data), "--predictions", s(&preds)][..],
        &["--report", s(&report), "--split", "val"][..],
        &c[..],
    ]
    .concat();
    let o = declutter(&eval);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"filter\": \"svd roi=4 drop=2\""));
    assert_eq!(code(&declutter(&eval)), 2);
    let o = declutter(&[&eval[..], &["--force"][..]].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&report).unwrap(), text);

    // every record, but only the validation ones were filtered
    let o = declutter(
        &[
            &["eval", "--manifest", s(&data), "--predictions", s(&preds)][..],
            &["--out", s(&tmp.path().join("all.json"))][..],
            &c[..],
        ]
        .concat(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing predictions"));
}

#[test]
fn train_then_filter_with_attention_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny run\nsim.height = 16\nsim.width = 16\nsim.frames = 4\nsim.limit = 4\n\
         sim.holdout = 0.5\nnet.levels = 1\nnet.base_channels = 2\ntrain.epochs = 1\n",
    )
    .unwrap();
    let c = ["--config", s(&cfg), "--seed", "9"];
    let data = tmp.path().join("data");
    assert_eq!(
        code(&declutter(
            &[&["simulate", "--out", s(&data)][..], &c[..]].concat()
        )),
        0
    );
    let model = tmp.path().join("model");
    let o = declutter(
        &[
            &[
                "train",
                "--manifest",
                s(&data),
                "--out",
                s(&model),
                "--net",
                "2d",
            ][..],
            &c[..],
        ]
        .concat(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(model.join("model.cfg"))
        .unwrap()
        .contains("net.temporal_kernels = false"));
    assert!(model.join("train_log.csv").is_file());

    let preds = tmp.path().join("preds");
    let att = tmp.path().join("att");
    let o = declutter(&[
        "filter",
        "--manifest",
        s(&data.join("manifest.tsv")),
        "--weights",
        s(&model.join("model.wgt")),
        "--out",
        s(&preds),
        "--attention-out",
        s(&att),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&att).unwrap().count(), 4 * 2);

    let missing = declutter(&[
        "filter",
        "--manifest",
        s(&data),
        "--weights",
        s(&tmp.path().join("nope.wgt")),
        "--out",
        s(&preds),
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn verify_passes_and_detects_injected_faults() {
    let o = declutter(&["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = declutter(&["verify", "--inject", "pool-tie"]);
    assert_eq!(code(&o), 3);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL  max-pool tie-break oracle"));
    assert_eq!(code(&declutter(&["verify", "--inject", "ssim-k1"])), 3);
}

#[test]
fn digest_tracks_resolved_parameters() {
    let digest = |args: &[&str]| {
        let o = declutter(args);
        stderr(&o)
            .lines()
            .find_map(|l| l.strip_prefix("config digest: ").map(str::to_string))
            .unwrap()
    };
    let a = digest(&["verify", "--seed", "1"]);
    assert_eq!(a, digest(&["verify", "--seed", "1"]));
    assert_ne!(a, digest(&["verify", "--seed", "2"]));
}
