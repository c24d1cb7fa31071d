//! The tensor container: write named f32/i64 records, read them back, and see
//! what a corrupted file reports. Also saves and reloads a model checkpoint.

use kmtalk::container::{read_container, write_container, TensorRecord};
use kmtalk::lkma::LkmaModel;
use kmtalk::model::ModelConfig;

fn main() -> kmtalk::Result<()> {
    let dir = std::env::temp_dir().join("kmtalk_checkpoints");
    std::fs::create_dir_all(&dir)?;

    let path = dir.join("demo.kmtf");
    write_container(
        &path,
        &[
            TensorRecord::from_f64("weights", &[2, 3], &[0.5, -1.0, 2.0, 0.25, 0.0, 3.5]),
            TensorRecord::from_i64("indices", &[4], vec![0, 3, 7, 12]),
        ],
    )?;
    for r in read_container(&path)? {
        match r.to_i64() {
            Ok(v) => println!("{} {:?} int64 {v:?}", r.name, r.shape),
            Err(_) => println!("{} {:?} float32 {:?}", r.name, r.shape, r.to_f64()?),
        }
    }
    let mut bytes = std::fs::read(&path)?;
    bytes.truncate(bytes.len() - 3);
    std::fs::write(dir.join("cut.kmtf"), &bytes)?;
    println!("truncated file: {}", read_container(dir.join("cut.kmtf")).unwrap_err());

    let model = LkmaModel::new(ModelConfig {
        vertex_count: 20,
        lip_vertices: vec![0, 1, 2],
        ..Default::default()
    })?;
    let ckpt = dir.join("lkma.kmtf");
    model.save(&ckpt, "demo")?;
    let back = LkmaModel::load(&ckpt)?;
    println!("checkpoint with {} scalars reloaded; schema in {}", back.store.scalar_count(), ckpt.with_extension("json").display());
    Ok(())
}
