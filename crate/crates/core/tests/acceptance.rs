//! Runs every acceptance criterion at its full budget and prints one line per
//! criterion. Criteria 6 and 7 train networks and take minutes.

use flood_core::verify::{run_all, AblationOptions, LearningOptions};

#[test]
fn acceptance_criteria() {
    let reports = run_all(0, &LearningOptions::default(), &AblationOptions::default());
    assert_eq!(reports.len(), 10);
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r.id as usize, i + 1);
        println!("{r}");
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    println!("acceptance: {}/{} passed", reports.len() - failed.len(), reports.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
