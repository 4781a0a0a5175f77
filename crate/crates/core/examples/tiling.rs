//! Render a 0.5 um/px synthetic slide, bring it to 1 um/px, find tissue
//! regions and cut the first one into its 20x20 patch grid.
//!
//! cargo run --release --example tiling -- [side_um]

use endonet::wsi::{
    compute_tissue_mask, downsample_to_target, extract_patches, generate_synthetic_slide, region_candidates, Grade,
    SyntheticSlideSpec, TissueParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let side: u32 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8960);
    let spec = SyntheticSlideSpec { mpp: 0.5, ..SyntheticSlideSpec::new("tiling", Grade::Low, side, 3) };
    let s = generate_synthetic_slide(&spec)?;
    for level in &s.slide.levels {
        println!("level {:.2} um/px: {}x{}", level.mpp, level.plane.width(), level.plane.height());
    }
    let plane = downsample_to_target(&s.slide, 1.0)?;
    let mask = compute_tissue_mask(&plane, &TissueParams::default())?;
    println!("1 um/px plane {}x{}, tissue {:.3}", plane.width(), plane.height(), mask.tissue_fraction());

    let candidates = region_candidates(plane.width(), plane.height(), &mask, 0.25);
    for c in &candidates {
        println!("  region {} tissue {:.3}", c.region.id(), c.tissue_fraction);
    }
    let Some(first) = candidates.first() else {
        println!("no region has enough tissue");
        return Ok(());
    };
    let patches = extract_patches(&plane, &first.region)?;
    println!(
        "region {}: {} slots, {} real patches, {} padding, patch side {} px",
        first.region.id(),
        first.region.slots(),
        patches.real_count(),
        patches.padding_count(),
        first.region.patch_px
    );
    Ok(())
}
