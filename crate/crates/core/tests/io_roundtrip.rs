mod common;

use dln_landscape::critical_points::build_critical_point;
use dln_landscape::data::generate_gaussian_data;
use dln_landscape::io::{read_data, read_json, read_weights, write_json, write_matrix_csv_file, write_weights, SpecJson};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_case;

#[test]
fn data_files_roundtrip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_gaussian_data(5, 3, 17, 4).unwrap();
    let (xp, yp) = (dir.path().join("X.csv"), dir.path().join("Y.csv"));
    write_matrix_csv_file(d.x(), &xp).unwrap();
    write_matrix_csv_file(d.y(), &yp).unwrap();
    assert_eq!(read_data(&xp, &yp).unwrap(), d);
}

#[test]
fn weights_and_specs_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..20 {
        let c = random_case(&[2, 3, 5], 6, if k % 2 == 0 { None } else { Some(10.0) }, &mut rng);
        let wp = dir.path().join("w.json");
        write_weights(&c.weights, &wp).unwrap();
        assert_eq!(read_weights(&wp).unwrap(), c.weights);

        let sp = dir.path().join("s.json");
        write_json(&SpecJson::from(&c.spec), &sp).unwrap();
        let spec = read_json::<SpecJson>(&sp).unwrap().to_spec(&c.shape).unwrap();
        assert_eq!(spec, c.spec);
        assert_eq!(build_critical_point(&c.shape, &c.bundle, &spec).unwrap(), c.weights);
    }
}
