use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Largest elementwise relative error between the tape's gradient of a
/// scalar function and a central finite-difference estimate.
///
/// `f` receives a fresh tape and one leaf per input tensor and must return
/// a scalar node. The difference quotient uses the fourth-order central
/// stencil with step `epsilon`; relative errors are taken against
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(inputs: &[Tensor], epsilon: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new(&[]);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new(&[]);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("grad_check needs a scalar function");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (t, a) in analytic.iter().enumerate() {
        for e in 0..inputs[t].len() {
            let x0 = inputs[t].data()[e];
            let mut at = |dx: f64| {
                work[t].data_mut()[e] = x0 + dx;
                eval(&work)
            };
            let numeric = (at(-2.0 * epsilon) - 8.0 * at(-epsilon) + 8.0 * at(epsilon)
                - at(2.0 * epsilon))
                / (12.0 * epsilon);
            work[t].data_mut()[e] = x0;
            let an = a.data()[e];
            let denom = an.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((an - numeric).abs() / denom);
        }
    }
    worst
}
