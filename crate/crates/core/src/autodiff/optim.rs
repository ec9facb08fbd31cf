use super::Tensor;
use crate::error::{Error, Result};

/// Plain SGD: `param <- param - lr * grad`, elementwise.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Param(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::Usage(
            "sgd_step called before gradients were populated".into(),
        ));
    }
    for p in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        p.values_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= lr * g);
    }
    Ok(())
}
