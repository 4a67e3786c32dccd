mod common;

#[test]
fn shaped_reward() {
    let summary = common::shaped_reward_suite().unwrap();
    println!("{summary}");
}
