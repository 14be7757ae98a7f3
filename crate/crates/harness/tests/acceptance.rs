use cachefs_harness::criteria::run_all;

#[test]
fn acceptance() {
    let verdicts = run_all();
    for v in &verdicts {
        println!("{v}");
    }
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| format!("{} {}", v.id, v.name)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
