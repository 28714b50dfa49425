//! Central-difference gradient checks on a two-block teacher and on the
//! joint student-teacher objective, then the same check with a planted 1%
//! gradient error.

use avsd::verify::{gradcheck_verdict, gradient_checks};

fn main() -> avsd::Result<()> {
    let (teacher, joint) = gradient_checks(1, 1.0)?;
    for (name, r) in [("teacher", &teacher), ("joint", &joint)] {
        println!("{}", gradcheck_verdict(name, r).detail);
        let mut groups = r.groups.clone();
        groups.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        for g in groups.iter().take(3) {
            println!("    {:<45} {:.2e} over {}", g.group, g.max_rel_error, g.checked);
        }
    }
    let (faulty, _) = gradient_checks(1, 1.01)?;
    let v = gradcheck_verdict("teacher with scaled gradients", &faulty);
    println!("{}: passed = {}", v.name, v.passed);
    Ok(())
}
