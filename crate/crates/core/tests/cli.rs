use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use outpaint_core::data::{synth_image, SynthSpec};
use outpaint_core::image::encode_png;
use outpaint_core::sampler::Sidecar;

const TINY: &str = "\
model.resolution_px = 16
model.patch_px = 4
model.hidden = 16
model.heads = 2
model.ffn_hidden = 32
model.enc_blocks = 1
model.dec_blocks = 1
diffusion.timesteps = 10
train.batch_size = 2
train.iterations = 2
train.log_every = 0
data.count = 4
";

fn outpaint(args: &[&str], env_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_outpaint"));
    cmd.args(args).env_remove("OUTPAINT_OUTPUT_DIR");
    if let Some(d) = env_dir {
        cmd.env("OUTPAINT_OUTPUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = outpaint(&[], None);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(outpaint(&["train", "--bogus"], None).status.code(), Some(2));
    let out = outpaint(&["rpe-dump", "--anchor", "1,2", "--target", "0,0,4,4"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rpe_dump_example() {
    let out = outpaint(&["rpe-dump", "--anchor", "32,32,128,128", "--target", "0,0,192,192", "--k", "8"], None);
    let text = ok(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("K_a=8 K_t=8 D=16"));
    assert_eq!(lines.next(), Some("rows -2 -0.5 1 2.5 4 5.5 7 8.5"));
    assert_eq!(lines.next(), Some("cols -2 -0.5 1 2.5 4 5.5 7 8.5"));
    assert_eq!(lines.count(), 64);
}

#[test]
fn unknown_config_key_fails_with_module_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "train.iteratons = 3\n").unwrap();
    let out = outpaint(&["train", "--config", s(&cfg), "--output-dir", s(&dir.path().join("o"))], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config: unknown key \"train.iteratons\""), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let train_dir = dir.path().join("train");
    ok(&outpaint(&["train", "--config", s(&cfg), "--output-dir", s(&train_dir)], None));
    let ck = train_dir.join("checkpoint.bin");
    assert!(ck.exists());
    let log = fs::read_to_string(train_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split(' ').count() == 3));

    // the echoed config reproduces the run
    let again = dir.path().join("again");
    let echoed = train_dir.join("effective.cfg");
    ok(&outpaint(&["train", "--config", s(&echoed), "--output-dir", s(&again)], None));
    assert_eq!(fs::read(&ck).unwrap(), fs::read(again.join("checkpoint.bin")).unwrap());

    let inputs = dir.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    fs::write(inputs.join("scene.png"), encode_png(&synth_image(&SynthSpec::default(), 0, 0, 128)).unwrap()).unwrap();
    let samples = dir.path().join("samples");
    let out = outpaint(
        &[
            "sample", "--config", s(&cfg), "--checkpoint", s(&ck), "--input", s(&inputs), "--multiple", "2.25",
            "--output-side", "192", "--ddim-calls", "3", "--copy", "--output-dir", s(&samples),
        ],
        None,
    );
    ok(&out);
    let side = Sidecar::parse(&fs::read_to_string(samples.join("scene_000.txt")).unwrap()).unwrap();
    assert_eq!(side.placement.to_string(), "32,32,128,128");
    assert_eq!(side.output, (192, 192));
    assert_eq!(side.denoise_calls, 3);
    assert!(samples.join("scene_000.png").exists());

    let report_dir = dir.path().join("report");
    let out = outpaint(&["eval", "--generated", s(&samples), "--inputs", s(&inputs), "--output-dir", s(&report_dir)], None);
    let text = ok(&out);
    assert!(text.contains("scene_000 inf"), "{text}");
    assert!(text.contains("mean_db = unavailable"));
    assert!(report_dir.join("eval_report.txt").exists());

    // sampling without a checkpoint is an error, not a crash
    let out = outpaint(&["sample", "--input", s(&inputs), "--output-dir", s(&samples)], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_uses_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = outpaint(&["bench", "--config", s(&cfg), "--multiples", "2.25,5,11.7", "--output-side", "48", "--ddim-calls", "2", "--repeats", "2"], Some(dir.path()));
    let text = ok(&out);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(" 2")));
    assert!(dir.path().join("bench.txt").exists());
    assert!(dir.path().join("effective.cfg").exists());
}
