//! Evaluate the training losses on hand-written logits and show how the
//! grand teacher is elected.
//!
//! cargo run --release --example loss_debug

use shike::losses::{
    consensus_mean, decouple_logits, dkt_loss, elect_grand_teacher, loss_bsce, loss_ce, loss_mutual,
    nontarget_softmax, softmax,
};

fn main() -> shike::Result<()> {
    // Three experts, four classes, true class 0.
    let z: [&[f64]; 3] = [&[2.0, 3.0, 0.5, -1.0], &[1.5, 0.5, 2.5, 0.0], &[2.5, 2.0, 1.0, -0.5]];
    let y = 0;
    let counts = [500, 120, 30, 5];

    let dec = z.iter().map(|v| decouple_logits(v, y)).collect::<shike::Result<Vec<_>>>()?;
    let mean = consensus_mean(&dec)?;
    let t = elect_grand_teacher(&dec)?;
    let hard = dec[0].index_map[t.consensus_index];
    println!("non-target mean logits {mean:?}");
    println!("consensus hardest negative: class {hard}");
    println!("grand teacher logits     {:?}", t.logits);
    println!("teacher distribution     {:?}", nontarget_softmax(&t.logits, 1.0)?);
    println!("plain mean distribution  {:?}", softmax(&mean, 1.0));

    let ce = loss_ce(&z, y)?;
    println!("L_ce   {:.6}  grad of expert 0 {:?}", ce.value, ce.grads[0]);
    println!("L_mu   {:.6}", loss_mutual(&z, 1.0)?.value);
    println!("L_nt   {:.6}", dkt_loss(&z, y, 1.0)?.value);
    println!("L_bsce {:.6}", loss_bsce(&z, y, &counts)?.value);
    Ok(())
}
