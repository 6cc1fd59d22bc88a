use std::path::Path;
use std::process::{Command, Output};

fn photovol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photovol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn phantom(dir: &Path, slices: usize) {
    let o = photovol(&[
        "phantom",
        dir.to_str().unwrap(),
        "--slices",
        &slices.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn reconstruct_without_stack_names_the_missing_product() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("case");
    phantom(&case, 6);
    let o = photovol(&["reconstruct", case.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(
        msg.contains("missing product") && msg.contains("stack"),
        "{msg}"
    );
}

#[test]
fn full_pipeline_writes_every_product() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("case");
    phantom(&case, 10);
    let c = case.to_str().unwrap();
    for stage in [
        "calibrate",
        "mask",
        "stack",
        "reconstruct",
        "segment",
        "evaluate",
    ] {
        let o = photovol(&[stage, c]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    for p in [
        "calibrated/calibration.json",
        "calibrated/provenance.json",
        "masks/provenance.json",
        "stack/image.nii",
        "stack/mask.nii",
        "recon/image.nii",
        "recon/mask.nii",
        "recon/transforms.json",
        "recon/provenance.json",
        "seg/seg.nii",
        "seg/posterior.nii",
        "seg/brightness_field.nii",
        "seg/params.json",
        "reports/volumes.tsv",
        "reports/volumes.json",
        "reports/dice.tsv",
        "reports/provenance.json",
    ] {
        assert!(case.join(p).is_file(), "{p} missing");
    }
    let dice = std::fs::read_to_string(case.join("reports/dice.tsv")).unwrap();
    assert_eq!(
        dice.lines().next().unwrap(),
        "label\tname\tdice\tpred_voxels\ttruth_voxels"
    );

    // rerunning a stage with unchanged inputs reproduces its products
    let before = std::fs::read(case.join("seg/params.json")).unwrap();
    assert!(photovol(&["segment", c]).status.success());
    assert_eq!(std::fs::read(case.join("seg/params.json")).unwrap(), before);
}

#[test]
fn edited_annotations_make_downstream_stages_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("case");
    phantom(&case, 6);
    let c = case.to_str().unwrap();
    for stage in ["calibrate", "mask"] {
        assert!(photovol(&[stage, c]).status.success());
    }
    let seeds = case.join("seeds.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&seeds).unwrap()).unwrap();
    let first = v.as_object_mut().unwrap().values_mut().next().unwrap();
    first[0] = serde_json::json!(first[0].as_f64().unwrap() + 1.0);
    std::fs::write(&seeds, serde_json::to_vec(&v).unwrap()).unwrap();
    let o = photovol(&["stack", c]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    assert!(photovol(&["mask", c]).status.success());
    assert!(photovol(&["stack", c]).status.success());
}

#[test]
fn bad_configuration_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("case");
    phantom(&case, 4);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[stack]\nthickness_mm = 0\n").unwrap();
    let o = photovol(&[
        "--config",
        cfg.to_str().unwrap(),
        "calibrate",
        case.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("thickness_mm"));
}

#[test]
fn config_command_prints_effective_values() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("case");
    phantom(&case, 4);
    let o = photovol(&["config", case.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let parsed: toml::Table = text.parse().unwrap();
    assert_eq!(parsed["stack"]["recon_resolution_mm"].as_float(), Some(1.5));
    assert_eq!(parsed["segment"]["atlas"].as_str(), Some("atlas/atlas.nii"));
}
