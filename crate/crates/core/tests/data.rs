mod common;

use common::rng;
use tce_core::data::{
    decode_pcf, encode_pcf, normalize_unit_sphere, parse_off, read_off_mesh, read_pcf, sample_mesh, sample_mesh_with,
    subsample, synth_dataset, synth_generate, write_off, write_pcf, Dataset, Label, OffMesh, PointCloud, ShapeKind,
    Split, SynthSpec, CUBE_HALF_EXTENT,
};
use tce_core::networks::Task;
use tce_core::Error;

#[test]
fn noiseless_sphere_lies_on_the_unit_sphere() {
    let c = synth_generate(ShapeKind::Sphere, 1000, 0.0, &mut rng(90)).unwrap();
    for i in 0..c.len() {
        let p = c.point(i).map(|v| v as f64);
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    let parts = c.parts().unwrap();
    assert!(parts.iter().zip(c.points.chunks(3)).all(|(&l, p)| (l == 2) == (p[2] >= 0.0)));
}

#[test]
fn noiseless_cube_points_sit_on_a_face() {
    let c = synth_generate(ShapeKind::Cube, 1000, 0.0, &mut rng(91)).unwrap();
    let h = CUBE_HALF_EXTENT as f32;
    for p in c.points.chunks(3) {
        assert!(p.iter().all(|v| v.abs() <= h));
        assert!(p.iter().any(|v| v.abs() == h), "{p:?}");
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    for kind in ShapeKind::ALL {
        let a = synth_generate(kind, 200, 0.02, &mut rng(5)).unwrap();
        let b = synth_generate(kind, 200, 0.02, &mut rng(5)).unwrap();
        let c = synth_generate(kind, 200, 0.02, &mut rng(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.points, c.points);
    }
    let spec = SynthSpec {
        task: Task::Classification,
        per_class: 3,
        points: 64,
        noise: 0.02,
        seed: 1,
    };
    let (x, y) = (
        synth_dataset(&spec, Split::Train).unwrap(),
        synth_dataset(&spec, Split::Train).unwrap(),
    );
    assert_eq!(x.clouds, y.clouds);
    assert_ne!(x.clouds, synth_dataset(&spec, Split::Test).unwrap().clouds);
}

fn parse_line(text: &str) -> usize {
    match parse_off(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn off_errors_carry_line_numbers() {
    assert_eq!(parse_line("PLY\n"), 1);
    assert_eq!(parse_line("OFF\nthree 1 0\n"), 2);
    assert_eq!(parse_line("OFF\n3 1 0\n0 0 0\n1 0 x\n0 1 0\n3 0 1 2\n"), 4);
    assert_eq!(parse_line("OFF\n# note\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), 7);
    assert_eq!(parse_line("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n"), 6);
    let quad = parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
    assert_eq!(quad.faces, [[0, 1, 2], [0, 2, 3]]);
}

fn triangle() -> Vec<[f32; 3]> {
    vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]
}

#[test]
fn fixed_draws_land_on_the_centroid() {
    // sqrt(4/9) = 2/3 and r2 = 1/2 give equal barycentric weights.
    let mut draws = [0.3, 4.0 / 9.0, 0.5].into_iter().cycle();
    let c = sample_mesh_with(&triangle(), &[[0, 1, 2]], 3, || draws.next().unwrap()).unwrap();
    for i in 0..3 {
        let p = c.point(i);
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && p[2] == 0.0, "{p:?}");
    }
}

#[test]
fn degenerate_faces_receive_no_samples() {
    let mut v = triangle();
    v.push([5.0, 5.0, 0.0]);
    let faces = [[0, 1, 1], [0, 1, 2], [3, 3, 3]];
    let c = sample_mesh(&v, &faces, 500, &mut rng(92)).unwrap();
    for p in c.points.chunks(3) {
        let [x, y] = [p[0] as f64, p[1] as f64];
        assert!(x >= -1e-6 && y >= -1e-6 && x + y <= 3.0 + 1e-5, "{p:?}");
    }
    assert!(matches!(sample_mesh(&v, &[[0, 1, 1]], 5, &mut rng(0)), Err(Error::Input(_))));
}

#[test]
fn mesh_samples_stay_inside_their_triangles() {
    let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let faces = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    let c = sample_mesh(&verts, &faces, 2000, &mut rng(93)).unwrap();
    let mut hits = [0usize; 4];
    for p in c.points.chunks(3) {
        let p = [p[0] as f64, p[1] as f64, p[2] as f64];
        assert!(p.iter().all(|&v| v >= -1e-6));
        assert!(p[0] + p[1] + p[2] <= 1.0 + 1e-5);
        let on = [p[2].abs() < 1e-6, p[1].abs() < 1e-6, p[0].abs() < 1e-6, (p[0] + p[1] + p[2] - 1.0).abs() < 1e-5];
        assert!(on.iter().any(|&b| b), "{p:?}");
        hits.iter_mut().zip(on).for_each(|(h, b)| *h += usize::from(b));
    }
    // Areas are 1/2 on three faces and sqrt(3)/2 on the slanted one.
    let slanted = hits[3] as f64 / 2000.0;
    let expected = 3f64.sqrt() / (3.0 + 3f64.sqrt());
    assert!((slanted - expected).abs() < 0.05, "{slanted} vs {expected}");
}

#[test]
fn normalization_is_idempotent() {
    let c = synth_generate(ShapeKind::Torus, 300, 0.05, &mut rng(94)).unwrap();
    let moved = PointCloud::new(c.points.iter().map(|v| v * 3.0 + 7.0).collect(), c.label.clone()).unwrap();
    let a = normalize_unit_sphere(&moved);
    let b = normalize_unit_sphere(&a);
    let max_norm = a.points.chunks(3).map(|p| p.iter().map(|v| v * v).sum::<f32>().sqrt()).fold(0.0, f32::max);
    assert!((max_norm - 1.0).abs() < 1e-6);
    for (x, y) in a.points.iter().zip(&b.points) {
        assert!((x - y).abs() < 1e-6);
    }
}

fn bit_rows(c: &PointCloud) -> Vec<[u32; 3]> {
    (0..c.len()).map(|i| c.point(i).map(f32::to_bits)).collect()
}

#[test]
fn subsampling_draws_distinct_points() {
    let c = synth_generate(ShapeKind::Cylinder, 1024, 0.02, &mut rng(95)).unwrap();
    let all = subsample(&c, 1024, &mut rng(1)).unwrap();
    let mut rows = bit_rows(&all);
    let mut orig = bit_rows(&c);
    rows.sort_unstable();
    orig.sort_unstable();
    assert_eq!(rows, orig);
    let half = subsample(&c, 512, &mut rng(2)).unwrap();
    let mut picked = bit_rows(&half);
    picked.sort_unstable();
    picked.dedup();
    assert_eq!(picked.len(), 512);
    assert_eq!(half.parts().unwrap().len(), 512);
    assert!(matches!(subsample(&c, 1025, &mut rng(3)), Err(Error::Parameter(_))));
}

#[test]
fn off_write_read_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.off");
    let mesh = OffMesh {
        vertices: vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 1e10, -0.0], [7.25, 0.2, f32::MIN_POSITIVE]],
        faces: vec![[0, 1, 2], [2, 1, 0]],
    };
    write_off(&path, &mesh).unwrap();
    let back = read_off_mesh(&path).unwrap();
    assert_eq!(back.faces, mesh.faces);
    let bits = |m: &OffMesh| m.vertices.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&mesh));
}

#[test]
fn pcf_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seg = synth_generate(ShapeKind::Sphere, 100, 0.02, &mut rng(96)).unwrap();
    let cls = PointCloud::new(seg.points.clone(), Label::Class(3)).unwrap();
    for (name, cloud) in [("seg.pcf", &seg), ("cls.pcf", &cls)] {
        let path = dir.path().join(name);
        write_pcf(&path, cloud).unwrap();
        assert_eq!(&read_pcf(&path).unwrap(), cloud);
    }
    let mut bytes = encode_pcf(&cls);
    bytes.pop();
    assert!(decode_pcf(&bytes).is_err());

    let spec = SynthSpec {
        task: Task::Segmentation,
        per_class: 2,
        points: 32,
        noise: 0.02,
        seed: 4,
    };
    let set = synth_dataset(&spec, Split::Test).unwrap();
    set.save_dir(dir.path().join("set").as_path()).unwrap();
    let back = Dataset::load_dir(dir.path().join("set").as_path(), Split::Test).unwrap();
    assert_eq!(back.clouds, set.clouds);
}
