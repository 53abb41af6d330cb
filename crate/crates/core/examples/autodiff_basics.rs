//! Builds a small expression on the tape, backpropagates, and compares one
//! gradient against a central difference.

use corrseg::autodiff::{gradcheck, Tape, Tensor};

fn main() -> corrseg::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[1, 2, 2, 2], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0])?.with_grad());
    let w = tape.leaf(Tensor::full(&[2, 1, 3, 3, 3], 0.1).with_grad());
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv3d(x, w, b, 1)?;
    let y = tape.sigmoid(y)?;
    let loss = tape.mean(y);
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("d loss / d x = {:?}", tape.grad(x).unwrap());

    let input = tape.value(x).clone();
    let err = gradcheck(
        |t, x| {
            let w = t.constant(Tensor::full(&[2, 1, 3, 3, 3], 0.1));
            let b = t.constant(Tensor::zeros(&[2]));
            let y = t.conv3d(x, w, b, 1)?;
            let y = t.sigmoid(y)?;
            Ok(t.mean(y))
        },
        &input,
        1e-5,
    )?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
