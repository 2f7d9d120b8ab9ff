//! Writes a few procedural vertex-coloured exemplar meshes as OBJ files.
//!
//! Usage: cargo run -p themeforge-core --example exemplars -- DIR

use themeforge::corpus::creature;

fn main() -> themeforge::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "exemplars".into());
    std::fs::create_dir_all(&dir)?;
    let palettes = [
        ("ember", [[0.85, 0.35, 0.15], [0.95, 0.75, 0.3]]),
        ("moss", [[0.25, 0.55, 0.25], [0.6, 0.8, 0.35]]),
        ("frost", [[0.3, 0.5, 0.85], [0.85, 0.9, 0.95]]),
    ];
    for (name, palette) in palettes {
        let path = std::path::Path::new(&dir).join(format!("{name}.obj"));
        creature(palette, name).save_obj(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}
