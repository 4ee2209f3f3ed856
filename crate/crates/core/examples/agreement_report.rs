//! Inter-rater statistics for a small engine-vs-human comparison.
//!
//! cargo run --example agreement_report

use aesf::metrics::{
    cohen_kappa, compare_engine_to_human, confusion, exact_agreement, qwk, qwk_agreement_weighted, report_tsv,
};

fn main() -> aesf::Result<()> {
    let initial = [0, 1, 2, 3, 2, 1, 0, 3, 2, 2];
    let reliability = [0, 1, 2, 2, 2, 1, 1, 3, 3, 2];
    let predicted = [0, 1, 2, 3, 1, 1, 0, 3, 2, 3];
    let k = 4;

    let m = confusion(&predicted, &initial, k)?;
    println!("confusion (engine rows, initial columns):");
    for row in m.to_rows() {
        println!("  {row:?}");
    }
    println!("exact agreement        {:.4}", exact_agreement(&m)?);
    println!("cohen kappa            {:.4}", cohen_kappa(&m)?);
    println!("quadratic kappa        {:.4}", qwk(&m)?);
    println!("agreement-weighted     {:.4}  (nonstandard study variant)", qwk_agreement_weighted(&m)?);

    let report = compare_engine_to_human(&initial, &reliability, &predicted, k)?;
    println!("\nengine >= human: {}", report.engine_at_least_human());
    print!("{}", report_tsv(&[(1, report)]));
    Ok(())
}
