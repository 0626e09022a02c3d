mod common;

use common::{random, rng};
use tce_core::checkpoint::{load_model, save_model, Checkpoint};
use tce_core::config::RunConfig;
use tce_core::networks::{Model, Task};
use tce_core::Error;

#[test]
fn reloaded_networks_give_bitwise_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for task in [Task::Classification, Task::Segmentation] {
        let config = RunConfig::defaults(task);
        let model = Model::<f32>::new(config.network.clone(), 17).unwrap();
        let path = dir.path().join(format!("{task}.ckpt"));
        save_model(&path, &config, &model).unwrap();
        let (back_config, back) = load_model::<f32>(&path).unwrap();
        assert_eq!(back_config.echo(), config.echo());
        assert!(back.params.same_as(&model.params));
        let coords = random(&[2 * 128, 3], &mut rng(100)).cast::<f32>();
        let a = model.infer(&coords, 2).unwrap();
        let b = back.infer(&coords, 2).unwrap();
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let config = RunConfig::defaults(Task::Classification);
    let model = Model::<f32>::new(config.network.clone(), 0).unwrap();
    let bytes = Checkpoint::from_params(&config.echo(), &model.params).encode();
    for at in [0, 5, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint(_))), "byte {at}");
    }
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let f64_model = Model::<f64>::new(config.network.clone(), 0).unwrap();
    let mut target = f64_model.params.clone();
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    assert!(ckpt.load_into(&mut target).is_err());
}
