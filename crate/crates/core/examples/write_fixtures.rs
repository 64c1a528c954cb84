//! Regenerates the bundled fixtures in `fixtures/`.
//!
//! ```text
//! cargo run --example write_fixtures
//! ```

use std::path::Path;

use contrastcam::toy::{sample_image, toy_classifier, toy_iqa};
use contrastcam::visual::{encode_png, write_atomic};

fn main() -> contrastcam::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    for (stem, builder) in [("toy_cnn", toy_classifier(7)), ("toy_iqa", toy_iqa(11))] {
        let (manifest, blobs) = builder.into_parts();
        write_atomic(&dir.join(format!("{stem}.json")), manifest.to_json().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.bin")), &blobs.to_bytes())?;
    }
    write_atomic(&dir.join("sample.png"), &encode_png(&sample_image(24, 24))?)?;
    write_atomic(&dir.join("sample_16.png"), &encode_png(&sample_image(16, 16))?)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
