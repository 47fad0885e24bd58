use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use progcodec::bitstream::frame_size;
use progcodec::ppm::{read_ppm, write_ppm, RgbImage};
use serde_json::Value;
use tempfile::TempDir;

const FRAMES: usize = 5;

fn progcodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progcodec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn progcodec")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn textured(width: usize, height: usize, seed: usize) -> RgbImage {
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let smooth = (x * (c + 1) * 3 + y * (seed % 7 + 2) * 2 + seed * 17) % 256;
                let noise = (x * 7919 + y * 104_729 + c * 31 + seed * 1_000_003).wrapping_mul(2_654_435_761) >> 27 & 31;
                data.push(((smooth + noise) % 256) as u8);
            }
        }
    }
    RgbImage::new(width, height, data).unwrap()
}

fn write_images(dir: &Path, count: usize, side: usize, seed: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        write_ppm(&dir.join(format!("img_{i:03}.ppm")), &textured(side, side, seed + i)).unwrap();
    }
}

/// A tiny trained checkpoint plus 48x48 frames, shared by the tests in this file.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
    frames: PathBuf,
}

fn train_args<'a>(data: &'a Path, frames: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "train", "--desk", "--data", s(data), "--eval-dir", s(frames), "--out", s(out), "--seed", "7",
        "--iterations", "4", "--batch-size", "2", "--checkpoint-every", "2", "--log-eval-images", "2",
    ]
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("train");
        let frames = root.join("frames");
        write_images(&data, 6, 64, 100);
        write_images(&frames, FRAMES, 48, 500);
        let checkpoint = root.join("ck.mcuk");
        ok(&progcodec(&train_args(&data, &frames, &checkpoint)));
        Fixture {
            _dir: dir,
            root,
            checkpoint,
            frames,
        }
    })
}

fn schema_check(schema: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(schema);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} violations: {errors:?}", path.display());
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no-such-images");
    let out = progcodec(&["train", "--desk", "--data", s(&missing), "--out", s(&tmp.path().join("ck.mcuk"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn bad_flags_and_thread_count_exit_2() {
    assert_eq!(progcodec(&["encode", "--bogus"]).status.code(), Some(2));
    assert_eq!(progcodec(&["frobnicate"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_progcodec"))
        .args(["bdrate", "a.json", "b.json"])
        .env("PROGCODEC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let f = fixture();
    let again = f.root.join("again.mcuk");
    ok(&progcodec(&train_args(&f.root.join("train"), &f.frames, &again)));
    assert_eq!(std::fs::read(&f.checkpoint).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn training_log_has_a_table_per_interval() {
    let f = fixture();
    let log = read_json(&f.root.join("ck.mcuk.log.json"));
    schema_check("train_log.schema.json", &log);
    let intervals = log["intervals"].as_array().unwrap();
    assert_eq!(intervals.iter().map(|i| i["iteration"].as_u64().unwrap()).collect::<Vec<_>>(), [2, 4]);
    for interval in intervals {
        let table = interval["progressive"].as_array().unwrap();
        assert_eq!(table.len(), 12);
        for (c, row) in table.iter().enumerate() {
            assert_eq!(row["channels"].as_u64(), Some(c as u64 + 1));
        }
    }
}

#[test]
fn encode_decode_round_trip() {
    let f = fixture();
    let stream = f.root.join("rt.mcuc");
    let printed = ok(&progcodec(&["encode", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--out", s(&stream)]));
    assert!(printed.contains("bpp"), "{printed}");
    let out_dir = f.root.join("rt");
    std::fs::create_dir_all(&out_dir).unwrap();
    ok(&progcodec(&["decode", "--checkpoint", s(&f.checkpoint), "--input", s(&stream), "--out-dir", s(&out_dir)]));
    let mut decoded: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    decoded.sort();
    assert_eq!(decoded.len(), FRAMES);
    for p in decoded {
        let img = read_ppm(&p).unwrap();
        assert_eq!((img.width, img.height), (48, 48));
    }
}

#[test]
fn encoding_is_deterministic_and_sized_by_the_closed_form() {
    let f = fixture();
    let encode = |c: &str, name: &str| {
        let path = f.root.join(name);
        ok(&progcodec(&[
            "encode", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--channels", c, "--out", s(&path),
        ]));
        std::fs::read(path).unwrap()
    };
    let one = encode("1", "c1.mcuc");
    let twelve = encode("12", "c12.mcuc");
    assert_eq!(twelve, encode("12", "c12-again.mcuc"));
    assert_eq!(one.len(), FRAMES * (4 + frame_size(48, 48, 1)));
    assert_eq!(twelve.len(), FRAMES * (4 + frame_size(48, 48, 12)));
    // 36 five-bit codes pack into 23 bytes: (16 + 29) vs (16 + 12 * 29) per frame.
    assert_eq!((frame_size(48, 48, 1), frame_size(48, 48, 12)), (45, 364));
    assert_eq!(progcodec(&["encode", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--channels", "13", "--out", s(&f.root.join("x.mcuc"))]).status.code(), Some(2));
}

#[test]
fn decode_survives_a_cut_at_a_channel_boundary_only() {
    let f = fixture();
    let stream = f.root.join("cut-src.mcuc");
    ok(&progcodec(&["encode", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--out", s(&stream)]));
    let bytes = std::fs::read(&stream).unwrap();
    let per_frame = 4 + frame_size(48, 48, 12);
    let keep_two_frames_and_five_channels = 2 * per_frame + 4 + frame_size(48, 48, 5);
    let out_dir = f.root.join("cut");
    std::fs::create_dir_all(&out_dir).unwrap();

    let boundary = f.root.join("boundary.mcuc");
    std::fs::write(&boundary, &bytes[..keep_two_frames_and_five_channels]).unwrap();
    ok(&progcodec(&["decode", "--checkpoint", s(&f.checkpoint), "--input", s(&boundary), "--out-dir", s(&out_dir)]));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 3);

    let mid = f.root.join("mid.mcuc");
    std::fs::write(&mid, &bytes[..keep_two_frames_and_five_channels + 10]).unwrap();
    let out = progcodec(&["decode", "--checkpoint", s(&f.checkpoint), "--input", s(&mid), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated stream"));
}

#[test]
fn malformed_ppm_names_file_and_offset() {
    let f = fixture();
    let dir = f.root.join("bad-frames");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("a.ppm"), b"P6\n48 48\n255\n\x00\x01").unwrap();
    let out = progcodec(&["encode", "--checkpoint", s(&f.checkpoint), "--frames", s(&dir), "--out", s(&f.root.join("bad.mcuc"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a.ppm") && err.contains("byte offset"), "{err}");
}

#[test]
fn bdrate_of_identical_curves_is_zero() {
    let f = fixture();
    let rd = f.root.join("rd-same.json");
    ok(&progcodec(&["eval", "--checkpoint", s(&f.checkpoint), "--eval-dir", s(&f.frames), "--out", s(&rd), "--metric", "psnr"]));
    schema_check("rd_curve.schema.json", &read_json(&rd));
    let report = f.root.join("bd.json");
    let printed = ok(&progcodec(&["bdrate", s(&rd), s(&rd), "--out", s(&report)]));
    assert!(printed.contains("0.000%"), "{printed}");
    let report = read_json(&report);
    schema_check("bdrate_report.schema.json", &report);
    assert_eq!(report["bd_rate_percent"].as_f64(), Some(0.0));
}

#[test]
fn bdrate_rejects_mismatched_metrics() {
    let tmp = TempDir::new().unwrap();
    let curve = |metric: &str| {
        format!(r#"{{"metric":"{metric}","points":[{{"bpp":0.1,"d":0.8}},{{"bpp":0.2,"d":0.85}},{{"bpp":0.4,"d":0.9}},{{"bpp":0.8,"d":0.95}}]}}"#)
    };
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    std::fs::write(&a, curve("ms-ssim")).unwrap();
    std::fs::write(&b, curve("psnr")).unwrap();
    assert_eq!(progcodec(&["bdrate", s(&a), s(&b)]).status.code(), Some(2));
}

#[test]
fn unlimited_simulation_matches_full_quality_eval() {
    let f = fixture();
    let rd = f.root.join("rd-ssim.json");
    let report = f.root.join("eval-report.json");
    ok(&progcodec(&[
        "eval", "--checkpoint", s(&f.checkpoint), "--eval-dir", s(&f.frames), "--out", s(&rd), "--report", s(&report),
    ]));
    let report = read_json(&report);
    schema_check("eval_report.schema.json", &report);
    let points = read_json(&rd)["points"].as_array().unwrap().clone();
    assert_eq!(points.len(), 12);

    let trace = f.root.join("huge.trace");
    std::fs::write(&trace, "# effectively unlimited\nbits 1000000000\n").unwrap();
    let stats_path = f.root.join("stats.json");
    ok(&progcodec(&[
        "simulate", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--trace", s(&trace), "--out", s(&stats_path),
    ]));
    let stats = read_json(&stats_path);
    schema_check("session_stats.schema.json", &stats);
    let summary = &stats["summary"];
    assert_eq!(summary["dropped"].as_u64(), Some(0));
    let full = &points[11];
    assert!((summary["mean_ms_ssim"].as_f64().unwrap() - full["d"].as_f64().unwrap()).abs() < 1e-9);
    assert!((summary["mean_bpp"].as_f64().unwrap() - full["bpp"].as_f64().unwrap()).abs() < 1e-12);
    for frame in stats["frames"].as_array().unwrap() {
        assert_eq!(frame["channels_sent"].as_u64(), Some(12));
    }
}

#[test]
fn starved_simulation_drops_every_frame() {
    let f = fixture();
    let trace = f.root.join("starved.trace");
    std::fs::write(&trace, "kbps 0.5\n").unwrap();
    let stats_path = f.root.join("starved.json");
    ok(&progcodec(&[
        "simulate", "--checkpoint", s(&f.checkpoint), "--frames", s(&f.frames), "--trace", s(&trace), "--out", s(&stats_path),
    ]));
    let stats = read_json(&stats_path);
    schema_check("session_stats.schema.json", &stats);
    assert_eq!(stats["summary"]["dropped"].as_u64(), Some(FRAMES as u64));
    assert!(stats["summary"]["mean_ms_ssim"].is_null());
}
