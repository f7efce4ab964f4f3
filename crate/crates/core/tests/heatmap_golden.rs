use std::path::PathBuf;

use bevssm::bench::{gen_sequences, heatmap_export, heatmap_pgm, SceneConfig, Split};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/scene_seed7.pgm")
}

fn fixture() -> Vec<u8> {
    let cfg = SceneConfig {
        seed: 7,
        ..Default::default()
    };
    let seqs = gen_sequences(&cfg, Split::Eval, 1, 1).unwrap();
    heatmap_pgm(&seqs[0].current().bev)
}

#[test]
fn seeded_scene_heatmap_matches_golden_file() {
    let got = fixture();
    let path = golden_path();
    if std::env::var_os("BEVSSM_BLESS").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read(&path).expect("golden file; regenerate with BEVSSM_BLESS=1");
    assert!(got.starts_with(b"P5\n50 50\n255\n"));
    assert_eq!(got.len(), want.len());
    let differing = got.iter().zip(&want).filter(|(a, b)| a != b).count();
    assert_eq!(differing, 0, "{differing} bytes differ from {}", path.display());
}

#[test]
fn export_writes_the_same_bytes() {
    let cfg = SceneConfig {
        seed: 7,
        ..Default::default()
    };
    let seqs = gen_sequences(&cfg, Split::Eval, 1, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.pgm");
    heatmap_export(&seqs[0].current().bev, &out).unwrap();
    assert_eq!(std::fs::read(out).unwrap(), fixture());
}
