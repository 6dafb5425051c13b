use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cloudseg::metrics::{compute_metrics, confusion, parse_report};
use cloudseg::net::{ArchitectureConfig, Mode, Network};
use cloudseg::raster::{read_msr, write_msr, RasterScene, Samples};
use cloudseg::segment::ProbabilityCanvas;
use cloudseg::synth::Manifest;
use cloudseg::train::{split_dataset, DEFAULT_RATIOS};

fn cloudseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config(data: &str, epochs: usize, out: &str) -> String {
    format!(
        "learning_rate = 0.003\nbeta1 = 0.9\nbeta2 = 0.999\nepsilon = 1e-8\nbatch_size = 8\nepochs = {epochs}\n\
         seed = 1\ncheckpoint_every = 10\narch_config_path = builtin:tiny\ndata_dir = {data}\noutput_dir = {out}\n"
    )
}

/// Synthesises 40 patches and trains the tiny network on them for a few epochs.
fn trained(dir: &Path) -> PathBuf {
    let o = cloudseg(&["synth", "--seed", "7", "--scenes", "40", "--size", "32x32", "--out", "d"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(dir.join("t.cfg"), config("d", 3, "run")).unwrap();
    let o = cloudseg(&["train", "--config", "t.cfg"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("run/final.cpw")
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_corpus_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = cloudseg(&["synth", "--seed", "7", "--scenes", "2", "--size", "96x80", "--out", out], tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = sorted_files(&tmp.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with(".msr")).count(), 4);
    assert_eq!(a, sorted_files(&tmp.path().join("b")));
    let m = Manifest::read_dir(tmp.path().join("a")).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(read_msr(&m.entries[0].scene).unwrap().width, 96);
}

#[test]
fn malformed_size_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["0x10", "12", "axb"] {
        let o = cloudseg(&["synth", "--scenes", "1", "--size", bad, "--out", "d"], tmp.path());
        assert_eq!(code(&o), 1);
        assert!(stderr(&o).contains("--size"), "{}", stderr(&o));
    }
}

#[test]
fn patchify_then_augment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&cloudseg(&["synth", "--scenes", "2", "--size", "100x70", "--out", "s"], dir)), 0);
    let o = cloudseg(&["patchify", "--data", "s", "--size", "32", "--out", "p"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 3 columns x 2 rows per scene
    let patches = Manifest::read_dir(dir.join("p")).unwrap();
    assert_eq!(patches.entries.len(), 12);
    let o = cloudseg(&["augment", "--data", "p", "--out", "a"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let aug = Manifest::read_dir(dir.join("a")).unwrap();
    assert_eq!(aug.entries.len(), 96);
    // the first variant of each source is the source itself
    assert_eq!(read_msr(&aug.entries[8].scene).unwrap().data, read_msr(&patches.entries[1].scene).unwrap().data);
    for (i, e) in aug.entries.iter().enumerate() {
        let f = patches.entries[i / 8].cloud_fraction;
        assert!((e.cloud_fraction - f).abs() < 1e-12);
    }
}

#[test]
fn train_writes_history_and_echoes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let history = std::fs::read_to_string(dir.join("run/history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc");
    assert_eq!(lines.len(), 4);
    assert!(dir.join("run/best.cpw").is_file());
    let sidecar = std::fs::read_to_string(dir.join("run/final.txt")).unwrap();
    // 36 training samples in batches of 8 is 5 steps per epoch
    assert_eq!(sidecar, "epoch = 3\nstep = 15\n");

    std::fs::write(dir.join("t2.cfg"), config("d", 1, "run2")).unwrap();
    let o = cloudseg(&["train", "--config", "t2.cfg"], dir);
    let banner = stdout(&o);
    assert!(banner.contains("learning_rate=0.003") && banner.contains("batch_size=8"), "{banner}");
}

#[test]
fn train_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("partial.cfg"), "learning_rate = 0.003\nseed = 1\n").unwrap();
    let o = cloudseg(&["train", "--config", "partial.cfg"], dir);
    assert_eq!(code(&o), 1);
    for key in ["beta1", "batch_size", "epochs", "data_dir", "arch_config_path"] {
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
    }
    std::fs::write(dir.join("nodata.cfg"), config("missing", 1, "run")).unwrap();
    assert_eq!(code(&cloudseg(&["train", "--config", "nodata.cfg"], dir)), 1);
}

#[test]
fn eval_matches_hand_tally() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let weights = trained(dir);
    let o = cloudseg(
        &["eval", "--weights", "run/final.cpw", "--data", "d", "--split", "test", "--report", "r.csv", "--seed", "1"],
        dir,
    );
    let report = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    assert!(report.starts_with("method,acc,prec,sn,sp\n"), "{report}");

    let wf = cloudseg::net::WeightFile::read(&weights).unwrap();
    let arch = cloudseg::net::Architecture::compile(ArchitectureConfig::tiny()).unwrap();
    let net = Network::from_weights(arch, &wf, Mode::Inference).unwrap();
    let manifest = Manifest::read_dir(dir.join("d")).unwrap();
    let split = split_dataset(manifest.entries.len(), DEFAULT_RATIOS, 1).unwrap();
    let mut cm = cloudseg::metrics::ConfusionMatrix::default();
    for &i in &split.test {
        let scene = read_msr(&manifest.entries[i].scene).unwrap();
        let gt = read_msr(&manifest.entries[i].mask).unwrap();
        let probs = net.infer(&cloudseg::raster::scene_to_tensor(&scene).unwrap()).unwrap();
        let canvas = ProbabilityCanvas {
            width: scene.width,
            height: scene.height,
            values: probs.into_data(),
            coverage: vec![1; scene.pixels()],
        };
        cm += confusion(&canvas.threshold(0.5, "p").unwrap(), &gt).unwrap();
    }
    let expected = compute_metrics("proposed", &cm);
    assert_eq!(parse_report(&report).unwrap()[0].to_csv_line(), expected.to_csv_line());
    assert_eq!(code(&o), if expected.is_complete() { 0 } else { 1 }, "{}", stderr(&o));
}

#[test]
fn eval_rejects_empty_split() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let _ = trained(dir);
    std::fs::create_dir(dir.join("empty")).unwrap();
    std::fs::write(dir.join("empty/manifest.txt"), "").unwrap();
    let o = cloudseg(
        &["eval", "--weights", "run/final.cpw", "--data", "empty", "--split", "val", "--report", "r.csv"],
        dir,
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = cloudseg(&["eval", "--weights", "run/final.cpw", "--data", "d", "--split", "dev", "--report", "r.csv"], dir);
    assert_eq!(code(&o), 1);
}

#[test]
fn segment_outputs_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let _ = trained(dir);
    assert_eq!(code(&cloudseg(&["synth", "--seed", "5", "--scenes", "1", "--size", "150x100", "--out", "s"], dir)), 0);
    let base = ["segment", "--weights", "run/final.cpw", "--scene", "s/scene_0000.msr", "--window", "48", "--overlap", "8"];

    let mut args = base.to_vec();
    args.extend(["--out", "m1.msr", "--prob", "p.msr", "--threads", "1"]);
    let o = cloudseg(&args, dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // x: 0, 40, 80, 102; y: 0, 40, 52
    assert!(stderr(&o).contains("4 x 3 = 12 windows"), "{}", stderr(&o));
    let mask = read_msr(dir.join("m1.msr")).unwrap();
    let prob = read_msr(dir.join("p.msr")).unwrap();
    assert_eq!((mask.width, mask.height, prob.bands), (150, 100, 1));
    let (Samples::U8(m), Samples::F32(p)) = (&mask.data, &prob.data) else { panic!("dtypes") };
    assert!(m.iter().zip(p).all(|(&m, &p)| (m == 255) == (p >= 0.5)));

    let mut args = base.to_vec();
    args.extend(["--out", "m3.msr", "--threads", "3"]);
    assert_eq!(code(&cloudseg(&args, dir)), 0);
    assert_eq!(std::fs::read(dir.join("m1.msr")).unwrap(), std::fs::read(dir.join("m3.msr")).unwrap());

    let o = cloudseg(&["segment", "--weights", "run/final.cpw", "--scene", "s/scene_0000.msr", "--out", "x.msr", "--overlap", "512"], dir);
    assert_eq!(code(&o), 1);

    let three = RasterScene::new(48, 48, 3, Samples::U16(vec![100; 48 * 48 * 3]), "rgb").unwrap();
    write_msr(&three, dir.join("rgb.msr")).unwrap();
    let o = cloudseg(&["segment", "--weights", "run/final.cpw", "--scene", "rgb.msr", "--out", "x.msr", "--window", "48", "--overlap", "8"], dir);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("bands"), "{}", stderr(&o));
}

#[test]
fn help_documents_fulls() {
    let tmp = tempfile::tempdir().unwrap();
    let seg = stdout(&cloudseg(&["segment", "--help"], tmp.path()));
    for d in ["[default: 512]", "[default: 50]", "[default: 0.5]"] {
        assert!(seg.contains(d), "{seg}");
    }
    let train = stdout(&cloudseg(&["train", "--help"], tmp.path()));
    assert!(train.contains("0.003") && train.contains("batch_size = 8"), "{train}");
    assert!(stdout(&cloudseg(&["patchify", "--help"], tmp.path())).contains("[default: 512]"));
    assert!(stdout(&cloudseg(&["eval", "--help"], tmp.path())).contains("[default: 0.5]"));
    assert_eq!(code(&cloudseg(&["--help"], tmp.path())), 0);
}
