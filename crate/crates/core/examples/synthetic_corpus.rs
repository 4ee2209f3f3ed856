//! Writes a seeded toy corpus in the scored-essay TSV layout.
//!
//! cargo run --example synthetic_corpus -- out.tsv [essays] [max_score] [seed]

use aesf::corpus::emit_tsv;
use aesf::synth::{synth_score, synthetic_essays, SynthSpec};

fn main() -> aesf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map_or("synthetic.tsv", String::as_str);
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let spec = SynthSpec::new(1, arg(1, 200) as usize, arg(2, 3) as i64, arg(3, 11));
    let essays = synthetic_essays(&spec)?;
    std::fs::write(path, emit_tsv(&essays))?;
    println!("{} essays for item {} written to {path}", essays.len(), spec.item);
    for e in essays.iter().take(3) {
        println!("  [{}] score {} (rule gives {}): {}", e.essay_id, e.resolved, synth_score(&e.text), e.text);
    }
    Ok(())
}
