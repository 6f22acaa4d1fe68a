use ped_core::canonical::CanonicalMap;
use ped_core::datagen::{make_shape_latents, sample_dataset};
use ped_core::eval::align_latents;
use ped_core::expfam::ExpFamily;
use ped_core::io::{read_dataset, write_dataset, DatasetFiles, DatasetMeta};
use ped_core::numkernel::rng::RngStream;
use ped_core::shallow::{infer_all, InferOptions};
use ped_core::train::{init_layer, train_shallow, TrainConfig};

fn small_dataset(family: ExpFamily, seed: u64) -> DatasetFiles {
    let lat = make_shape_latents(60).unwrap().subsample(1500, seed);
    let ds = sample_dataset(&lat, 20, family, &CanonicalMap::Identity, seed).unwrap();
    DatasetFiles {
        meta: DatasetMeta {
            family,
            maps: vec![CanonicalMap::Identity],
            seed,
            dims: vec![20, 2],
            resolution: 60,
            samples: lat.len(),
            clamp_count: ds.clamp_count,
        },
        y: ds.y,
        z_true: lat.z,
        w_true: vec![ds.w_true],
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let data = small_dataset(ExpFamily::Poisson, 3);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), data);
}

#[test]
fn gaussian_training_recovers_latent_plane() {
    let data = small_dataset(ExpFamily::Gaussian, 1);
    let mut rng = RngStream::new(1).split(77);
    let init = init_layer(20, 2, 0.1, ExpFamily::Gaussian, CanonicalMap::Identity, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 250,
        ..TrainConfig::default()
    };
    let out = train_shallow(&data.y, &init, &cfg).unwrap();
    let first = out.history.first().unwrap().objective;
    let last = out.history.last().unwrap().objective;
    assert!(last < first);
    let z = infer_all(&data.y, &out.layer, &cfg.solver, &InferOptions::default()).unwrap().z;
    let al = align_latents(&z, &data.z_true).unwrap();
    assert!(al.r2.iter().all(|r| *r > 0.8), "{:?}", al.r2);
}
