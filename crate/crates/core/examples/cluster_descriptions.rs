//! Hierarchical clustering of building descriptions with every linkage
//! method, cut at a fraction of the tallest merge.
//!
//! cargo run --example cluster_descriptions -- [metadata.csv schema.txt] [fraction]
//!
//! Without files, the synthetic fleet's descriptions are used. The average
//! linkage dendrogram is written to `dendrogram.svg` in the temp directory.

use std::path::Path;

use crossgrid::evaluation::description_clusters;
use crossgrid::metadata::{load_descriptions, Encoding, LoadOptions, Schema};
use crossgrid::similarity::LinkageMethod;
use crossgrid::svg::{dendrogram, SvgOptions};
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (table, rest) = if args.len() >= 2 && Path::new(&args[0]).is_file() {
        let schema = Schema::load(Path::new(&args[1]))?;
        (load_descriptions(Path::new(&args[0]), &schema, &LoadOptions::default())?, &args[2..])
    } else {
        (SyntheticFleet::generate(&FleetConfig::default())?.descriptions, &args[..])
    };
    let fraction: f64 = rest.first().and_then(|s| s.parse().ok()).unwrap_or(0.7);
    print!("{}", table.to_csv());

    for method in LinkageMethod::ALL {
        for encoding in [Encoding::OneHot, Encoding::Label] {
            let (tree, clusters) = description_clusters(&table, encoding, method, fraction)?;
            println!(
                "{method:>8} / {:<6} max height {:.3}: {:?}",
                encoding.tag(),
                tree.max_height(),
                clusters.groups()
            );
        }
    }

    let (tree, _) = description_clusters(&table, Encoding::OneHot, LinkageMethod::Average, fraction)?;
    let path = std::env::temp_dir().join("dendrogram.svg");
    let opts = SvgOptions {
        title: Some("average linkage, one-hot".into()),
        ..SvgOptions::default()
    };
    std::fs::write(&path, dendrogram(&tree, Some(fraction * tree.max_height()), &opts))?;
    println!("dendrogram written to {}", path.display());
    Ok(())
}
