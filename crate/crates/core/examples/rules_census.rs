//! Parse a ruleset, print the class/category census and the canonical form.
//!
//!     cargo run --example rules_census [-- path/to/rules]

use hostguard::rules::{parse_ruleset, render_ruleset, RuleClass};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/rules/rules.v1.txt").into());
    let text = std::fs::read_to_string(&path).expect("read rules");
    let rs = match parse_ruleset(&text, 1) {
        Ok(rs) => rs,
        Err(e) => {
            for line_err in &e.errors {
                eprintln!("{path}: {line_err}");
            }
            std::process::exit(2);
        }
    };

    println!("{} rules in {path}", rs.len());
    for class in RuleClass::ALL {
        println!("  {:<11} {}", class, rs.count_class(class));
    }
    // Each class is bound to one data direction per connection direction,
    // which gives the four categories.
    for (cat, n) in rs.census() {
        println!("  {:<16} {n}", cat.as_str());
    }
    println!("\ncanonical form:\n{}", render_ruleset(&rs));

    let broken = "alert tcp any any -> any any (msg:\"x\"; content:\"a\"; content:\"b\"; distance:1; distance:2; sid:9;)";
    match parse_ruleset(broken, 0) {
        Ok(_) => unreachable!(),
        Err(e) => println!("rejected: {e}"),
    }
}
