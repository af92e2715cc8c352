//! Probing the student: run every tagged question past the student model,
//! grade each response, and collect the failures as error cases.
//!
//! Also demonstrates the two graders on their own: final-number matching
//! for math, and a sandboxed test run for code.
//!
//! ```text
//! cargo run --example evaluate_student
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use cds::evaluation::{collect_errors, evaluate, grade_math, CodeRunner};
use cds::gateway::templates::TemplateStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (kc_set, tagged) = scripted::tagged_corpus();
    let student = scripted::clients().student;
    let templates = TemplateStore::builtin();

    // One graded record per question, in corpus order.
    let records = evaluate(&tagged, &student, &templates, None)?;
    println!("student transcript:");
    for (record, sample) in records.iter().zip(&tagged) {
        let mark = if record.correct { "ok  " } else { "MISS" };
        let question: String = sample.sample.question.chars().take(52).collect();
        let shown = record.response.lines().last().unwrap_or("");
        println!(
            "  {} {:<4} {:<52}  student: {}",
            mark, record.sample_id, question, shown
        );
    }
    let misses = records.iter().filter(|r| !r.correct).count();
    println!("  {} of {} answered incorrectly", misses, records.len());

    // Error cases carry the question, the wrong response, and the KC tags
    // forward into diagnosis.
    let errors = collect_errors(&records, &tagged)?;
    println!("\nerror cases ({}):", errors.len());
    for case in &errors {
        println!(
            "  {:<4} KCs [{}]",
            case.sample_id,
            kc_set.labels_for(&case.kc_ids)?.join(", ")
        );
    }

    // The math grader compares final numbers, tolerant of formatting.
    println!("\nmath grader on formatting variants:");
    for (response, reference) in [
        ("The total is #### 1,000", "1000"),
        ("Half of it. #### .5", "0.5"),
        ("I think the answer is 12", "12"),
        ("First guess 7, revised: #### 8", "8"),
        ("The total is #### 19", "18"),
    ] {
        println!(
            "  {:<34} vs {:<6} -> {}",
            format!("{:?}", response),
            format!("{:?}", reference),
            grade_math(response, reference)
        );
    }

    // The code grader extracts a fenced block, writes it next to the test
    // file, and runs the tests inside a time limit.
    let runner = CodeRunner::default();
    let solution = "```python\ndef add(a, b):\n    return a + b\n```";
    let tests = "import solution\nassert solution.add(2, 3) == 5\n";
    match runner.grade(solution, tests) {
        Ok(grade) => println!(
            "\ncode grader: passed={} ({})",
            grade.passed,
            grade.reason.as_deref().unwrap_or("clean run")
        ),
        Err(err) => println!("\ncode grader unavailable here: {err}"),
    }
    Ok(())
}
