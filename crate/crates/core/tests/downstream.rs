use echosynth::data::phantom::{patient_id, phantom};
use echosynth::data::{PatientRecord, Provenance};
use echosynth::downstream::{
    classification_columns, compare_regimes, linear_probe, segmentation_columns, train_segmentation, Backbone,
    ConvBackbone, ProbeConfig, RegimeResult, SegConfig,
};
use echosynth::prompt::ViewPhase;

fn records(patients: std::ops::Range<usize>, size: usize) -> Vec<PatientRecord> {
    patients
        .flat_map(|p| {
            ViewPhase::all().into_iter().map(move |vp| {
                let (image, labels) = phantom(p as u64, vp, size);
                PatientRecord {
                    patient_id: patient_id(p),
                    view_phase: vp,
                    image,
                    label_map: Some(labels),
                    provenance: Provenance::Real,
                    source_prompt: None,
                }
            })
        })
        .collect()
}

#[test]
fn desk_segmentation_reaches_half_dice() {
    // 52 training images, 16 held-out images from unseen patients
    let train = records(0..13, 64);
    let val = records(100..104, 64);
    let run = train_segmentation(&SegConfig::desk(), &train, &val).unwrap();
    for e in &run.history {
        eprintln!("epoch {} loss {:.4} dice {:.4}", e.epoch, e.train_loss, e.val_metric);
    }
    assert!(run.scores.mean_dice > 0.5, "mean dice {}", run.scores.mean_dice);
}

#[test]
fn probe_keeps_backbone_and_compares() {
    let train = records(0..20, 32);
    let val = records(100..106, 32);
    let bb = ConvBackbone::small(0, 32, &[8, 16, 32]).unwrap();
    let before = bb.checksum();
    let cfg = ProbeConfig::desk();
    let a = linear_probe(&cfg, &bb, &train, &val).unwrap();
    assert_eq!(bb.checksum(), before);
    assert_eq!(a.backbone_checksum, before);
    let b = linear_probe(&ProbeConfig { seed: 1, ..cfg }, &bb, &train, &val).unwrap();
    let as_result = |regime: &str, run: &echosynth::downstream::ProbeRun| RegimeResult {
        regime: regime.into(),
        backbone: Some(run.backbone.clone()),
        seed: 0,
        validation_hash: "val".into(),
        metrics: classification_columns(&run.scores),
        history: run.history.clone(),
    };
    let c = compare_regimes(&[as_result("a", &a), as_result("b", &b)]).unwrap();
    assert_eq!(c.columns, ["ACC", "PR", "RC", "F1"]);
    let _ = segmentation_columns;
}
