//! Generates a few referring scenes, prints them and writes them to disk.
//!
//! cargo run --release --example generate_scenes -- [seed] [out_dir]

use semflow::synth::{generate_set, read_dataset, write_dataset, SceneSpec};

fn main() -> semflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("semflow_scenes").to_string_lossy().into_owned());
    let spec = SceneSpec::default();
    let scenes = generate_set(&spec, seed, 0..4)?;
    for s in &scenes {
        let cond: Vec<String> = s.condition.iter().map(|a| a.to_string()).collect();
        println!("scene {} condition [{}] -> object {}", s.id, cond.join(", "), s.referred);
        for (i, o) in s.objects.iter().enumerate() {
            let area = s.masks.row(i).iter().filter(|&&v| v > 0.5).count();
            println!("  {i}: {:?} {:?} {:?} {:?} area {area}", o.shape, o.color, o.size, o.quadrant);
        }
        let small = s.target_masks(2)?;
        for y in 0..small.shape()[1] {
            let row: String = (0..small.shape()[2])
                .map(|x| {
                    let hit = (0..s.num_objects()).find(|&k| small.row(k)[y * small.shape()[2] + x] > 0.5);
                    match hit {
                        Some(k) if k == s.referred => '#',
                        Some(_) => 'o',
                        None => '.',
                    }
                })
                .collect();
            println!("  {row}");
        }
    }
    let dir = std::path::Path::new(&out);
    write_dataset(dir, &spec, &scenes)?;
    println!("wrote {} scenes to {}, read back {}", scenes.len(), dir.display(), read_dataset(dir)?.len());
    Ok(())
}
