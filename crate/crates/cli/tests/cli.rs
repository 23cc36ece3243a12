use std::path::Path;
use std::process::Command;

use capvid::synthdata::{generate_clip, render_reference, sample_spec, Color, Shape, Subject, Texture};
use capvid_cli::commands::tree_hash;

const TINY: &str = r#"
seed = 3

[model]
latent_channels = 3
width = 8
heads = 2
cond_dim = 8
time_dim = 8
mlp_mult = 2
subject_tokens = 2
encoder_width = 4
image_size = 8
vocab_size = 37
max_positions = 32
text_mixer = false

[sampler]
ddim_steps = 4

[finetune]
steps = 2

[corpus]
n_clips = 6
n_frames = 3
resolution = 8
val_fraction = 0.2

[train]
steps = 3
warmup = 1
attribute_batch = 2
window_frames = 2
"#;

fn capvid(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_capvid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let vocab = capvid::conditioning::Vocabulary::default().len();
    let text = TINY.replace("vocab_size = 37", &format!("vocab_size = {vocab}"))
        + &format!("\n[paths]\nhome = \"{}\"\n", dir.join("home").display());
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    ok(&capvid(&["generate-data", "--config", &cfg]));
    let home = tmp.path().join("home");
    assert!(home.join("corpus/manifest.jsonl").exists());
    assert!(home.join("corpus/provenance.json").exists());

    let again = capvid(&["generate-data", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(4), "existing output without --force");
    ok(&capvid(&["generate-data", "--config", &cfg, "--force"]));

    ok(&capvid(&["train", "--config", &cfg]));
    assert!(home.join("model.ckpt").exists());

    let spec = sample_spec(9, 0, 3, 8);
    let clip_dir = tmp.path().join("clip");
    generate_clip(&spec).to_clip().save_dir(&clip_dir).unwrap();
    let reference = tmp.path().join("ref.png");
    let subject = Subject {
        shape: Shape::Circle,
        color: Color::Blue,
        texture: Texture::Solid,
    };
    render_reference(subject, 1, 8).save_png(&reference).unwrap();

    let out_a = tmp.path().join("edit_a");
    let edit = |out: &Path| {
        capvid(&[
            "edit",
            "--config",
            &cfg,
            "--video",
            clip_dir.to_str().unwrap(),
            "--edit-prompt",
            "a circle moving on the plain",
            "--reference-image",
            reference.to_str().unwrap(),
            "--attn-every",
            "1",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    ok(&edit(&out_a));
    for f in [
        "edited/manifest.json",
        "reconstructed/manifest.json",
        "masks",
        "provenance.json",
        "grid.png",
    ] {
        assert!(out_a.join(f).exists(), "{f} missing");
    }
    assert!(out_a.join("attention_edit.bin").exists());
    let out_b = tmp.path().join("edit_b");
    ok(&edit(&out_b));
    assert_eq!(tree_hash(&out_a).unwrap(), tree_hash(&out_b).unwrap());

    let heat = capvid(&["dump-attn", "--result", out_a.to_str().unwrap(), "--t", "1"]);
    ok(&heat);
    let png = String::from_utf8_lossy(&heat.stdout).trim().to_string();
    assert!(Path::new(&png).exists());

    let missing = capvid(&["dump-attn", "--result", out_a.to_str().unwrap(), "--t", "999"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("available"));
}

#[test]
fn config_errors_map_to_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[sampler]\nsteps = 3\n").unwrap();
    let out = capvid(&["generate-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));

    let usage = capvid(&["edit"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_path_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let clip_dir = tmp.path().join("clip");
    generate_clip(&sample_spec(1, 0, 3, 8))
        .to_clip()
        .save_dir(&clip_dir)
        .unwrap();
    let out = capvid(&[
        "edit",
        "--config",
        &cfg,
        "--video",
        clip_dir.to_str().unwrap(),
        "--edit-prompt",
        "a circle moving on the plain",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
