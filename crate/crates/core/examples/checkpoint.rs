//! Saves a model, reloads it and shows that tampering is detected.

use semflow::checkpoint::Checkpoint;
use semflow::config::RunConfig;
use semflow::model::Model;

fn main() -> semflow::Result<()> {
    let cfg = RunConfig::parse("seed = 11")?;
    let model = Model::new(&cfg.model(), 11)?;
    let ck = Checkpoint::from_model(&cfg, 0, &model);
    let dir = std::env::temp_dir().join("semflow_checkpoint");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("init.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?.model(Some(&cfg))?;
    let same = model.store.iter().zip(back.store.iter()).all(|((_, a), (_, b))| a.bit_eq(b));
    println!("{} sha256 {} round trip identical {same}", path.display(), ck.digest_hex());

    let mut bytes = std::fs::read(&path)?;
    bytes[40] ^= 1;
    std::fs::write(&path, &bytes)?;
    println!("after flipping one byte: {}", Checkpoint::load(&path).err().map_or("loaded".into(), |e| e.to_string()));

    let mut other = cfg.clone();
    other.decoder.queries += 1;
    println!("with a different query count: {}", ck.model(Some(&other)).err().map_or("loaded".into(), |e| e.to_string()));
    Ok(())
}
