//! Runs every acceptance criterion, printing one PASS/FAIL line each.
//! Exits nonzero if any criterion fails.

use collab_core::verify;

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (key, check) in verify::ALL {
        if !filter.is_empty() && !filter.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let result = check();
        println!("{result}");
        ran += 1;
        failed += usize::from(!result.passed);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
