//! Parameter and MAC breakdown for every variant.

use mambamic::{Backbone, ModelConfig};

fn main() -> mambamic::Result<()> {
    for name in ModelConfig::VARIANTS {
        let model = Backbone::new(ModelConfig::variant(name, 2, 3)?)?;
        let report = model.report(224);
        println!("== {name} ==");
        print!("{}", report.to_table());
    }
    Ok(())
}
