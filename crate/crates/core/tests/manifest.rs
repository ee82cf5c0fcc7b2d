use std::path::Path;

use douc::io::{load_manifest, write_manifest, write_tensor, ExportConfig, ManifestDoc, TensorFile};
use douc::synthetic::{toy_engine, write_export, ToySpec};
use douc::{DoucError, Engine};

fn export(dir: &Path) -> std::path::PathBuf {
    write_export(dir, &toy_engine(&ToySpec::default(), 1), "toy", ExportConfig::default()).unwrap()
}

fn doc(path: &Path) -> ManifestDoc {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_manifest_validates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        with_ln_pre: false,
        ..Default::default()
    };
    let path = write_export(dir.path(), &toy_engine(&spec, 2), "toy", ExportConfig::default()).unwrap();
    let mut d = doc(&path);
    // optional biases may be omitted
    d.entries.retain(|k, _| !k.contains(".attn.b_"));
    write_manifest(&path, &d).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.doc.grid(), (4, 4));
    let engine = Engine::from_manifest(&m).unwrap();
    assert!(engine.model.ln_pre.is_none());
    assert!(engine.model.blocks[0].b_q.iter().all(|&b| b == 0.0));
}

#[test]
fn wrong_text_bank_shape_names_the_role() {
    let dir = tempfile::tempdir().unwrap();
    let path = export(dir.path());
    let d = doc(&path);
    let bank = dir.path().join(&d.entries["text_bank"]);
    write_tensor(&bank, &TensorFile::new(vec![3, 5], vec![0.0; 15]).unwrap()).unwrap();
    match load_manifest(&path) {
        Err(DoucError::Role { role, message }) => {
            assert_eq!(role, "text_bank");
            assert!(message.contains("[3, 4]"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_role_and_bad_fields_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = export(dir.path());

    let mut d = doc(&path);
    d.entries.remove("blocks.1.mlp.w_fc");
    write_manifest(&path, &d).unwrap();
    match load_manifest(&path) {
        Err(DoucError::Role { role, .. }) => assert_eq!(role, "blocks.1.mlp.w_fc"),
        other => panic!("{other:?}"),
    }

    let mut d = doc(&path);
    d.entries.remove("ln_pre.beta");
    d.entries
        .insert("blocks.1.mlp.w_fc".into(), "tensors/blocks.1.mlp.w_fc.bin".into());
    write_manifest(&path, &d).unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(DoucError::Role { .. } | DoucError::Manifest { .. })
    ));

    let mut d = doc(&path);
    d.entries.insert("ln_pre.beta".into(), "tensors/ln_pre.beta.bin".into());
    d.image_size = [15, 16];
    write_manifest(&path, &d).unwrap();
    match load_manifest(&path) {
        Err(DoucError::Manifest { field, .. }) => assert_eq!(field, "image_size"),
        other => panic!("{other:?}"),
    }

    std::fs::write(&path, r#"{"model_id": "x"}"#).unwrap();
    match load_manifest(&path) {
        Err(e @ DoucError::Manifest { .. }) => assert_eq!(e.exit_kind() as i32, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_tensor_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = export(dir.path());
    std::fs::remove_file(dir.path().join("tensors/proj.bin")).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert_eq!(err.exit_kind() as i32, 3, "{err}");
}
