//! Write a procedural interaction as CSV and as bvh-lite text.
//!
//! ```bash
//! cargo run -p interaug --example export -- circle /tmp/circle
//! ```

use std::fs::File;
use std::io::BufWriter;

use interaug::cli::write_bvh_lite;
use interaug::dataset::gen_base_clip;
use interaug::skeleton::Skeleton;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map(String::as_str).unwrap_or("circle");
    let stem = args.get(1).cloned().unwrap_or_else(|| kind.to_string());

    let clip = gen_base_clip(kind, &Skeleton::desk7(), 64, 0)?;
    clip.write_csv(BufWriter::new(File::create(format!("{stem}.csv"))?))?;
    write_bvh_lite(&clip, BufWriter::new(File::create(format!("{stem}.bvhl"))?))?;
    println!("wrote {stem}.csv and {stem}.bvhl");
    Ok(())
}
