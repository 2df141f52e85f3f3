//! Writes a synthetic CMAF store and its manifest sidecar.
//!
//! ```text
//! cargo run -p cma-core --example synth_store -- <out.cmaf> [blobs|complementary] [dim] [per_class] [seed]
//! ```

use std::path::PathBuf;

use cma_core::cmaf::{manifest_path, write_manifest, write_store};
use cma_core::datastore::StoreManifest;
use cma_core::synth::{generate, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synth_store <out.cmaf> [blobs|complementary] [dim] [per_class] [seed]");
        std::process::exit(1);
    };
    let kind = args.get(1).map(String::as_str).unwrap_or("blobs");
    let dim: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(64);
    let per_class: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed: u64 = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(1);

    let name = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let mut spec = match kind {
        "blobs" => SynthSpec::blobs(&name, dim, per_class),
        "complementary" => SynthSpec::complementary(&name, dim, per_class),
        other => return Err(format!("unknown kind `{other}`").into()),
    };
    spec.sample_seed = seed;
    let store = generate(&spec)?;
    write_store(&store, &out)?;
    let mut manifest = StoreManifest::describe(&store);
    manifest.provenance = serde_json::json!({ "generator": kind, "sample_seed": seed });
    write_manifest(&manifest, &manifest_path(&out))?;
    println!("wrote {} ({} records, d={dim})", out.display(), store.len());
    Ok(())
}
