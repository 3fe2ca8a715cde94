fn main() {
    use advmetric::dataset::{synth, SplitTag};
    let ds = synth::generate(20, 1, SplitTag::Train).unwrap();
    for i in 0..10 {
        println!("label {}", ds.label(i));
        for row in ds.image(i).chunks(28) {
            let line: String = row.iter().map(|&p| if p > 0.6 {'#'} else if p > 0.2 {'+'} else {'.'}).collect();
            println!("{line}");
        }
    }
}
