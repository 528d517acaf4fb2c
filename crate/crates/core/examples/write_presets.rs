//! Regenerate `configs/<preset>.json`. Run from the crate root:
//! `cargo run --example write_presets`.

use iterboot::harness::SimSetting;

fn main() -> std::io::Result<()> {
    for name in SimSetting::PRESETS {
        let s = SimSetting::preset(name).expect("listed preset");
        let text = serde_json::to_string_pretty(&s).expect("settings serialize") + "\n";
        std::fs::write(format!("configs/{name}.json"), text)?;
    }
    Ok(())
}
