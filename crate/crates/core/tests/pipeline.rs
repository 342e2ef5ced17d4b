use pathdiff::dataset::{dataset_checksum, denormalize, make_record, read_records, write_records, DenormalizeOptions};
use pathdiff::gcode::{emit_layer, parse_program, validate_layer, PrinterProfile};
use pathdiff::geometry::{random_spec, rasterize, synth_sample, InfillKind, ShapeKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn records(seed: u64) -> Vec<pathdiff::dataset::TrainingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, kind) in [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Annulus, ShapeKind::CShape].into_iter().enumerate() {
        for infill in [InfillKind::Rectilinear, InfillKind::Concentric] {
            let spec = random_spec(&mut rng, kind, infill);
            let (contour, path) = synth_sample(&spec, i as u64).unwrap();
            out.push(make_record(rasterize(&contour).unwrap(), &path, 128, kind.name()).unwrap());
        }
    }
    out
}

#[test]
fn synthetic_paths_emit_valid_gcode() {
    let profile = PrinterProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::CShape] {
        let spec = random_spec(&mut rng, kind, InfillKind::Rectilinear);
        let (_, path) = synth_sample(&spec, 1).unwrap();
        let program = emit_layer(&path.keypoints, &profile, path.z);
        let parsed = parse_program(&program).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].keypoints.len(), path.keypoints.len());
        assert!(validate_layer(&parsed[0].keypoints, &profile).is_valid());
    }
}

#[test]
fn records_survive_disk_and_denormalize() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(11);
    write_records(dir.path(), &recs).unwrap();
    let back = read_records(dir.path()).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.true_len, b.true_len);
        assert_eq!(a.norm, b.norm);
        for (p, q) in a.x0.iter().zip(&b.x0) {
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-6);
            }
        }
        let kps = denormalize(&b.x0, &b.mask, &b.norm, &DenormalizeOptions::default()).unwrap();
        assert_eq!(kps.len(), b.true_len);
    }

    let other = tempfile::tempdir().unwrap();
    write_records(other.path(), &records(11)).unwrap();
    assert_eq!(dataset_checksum(dir.path()).unwrap(), dataset_checksum(other.path()).unwrap());
}
