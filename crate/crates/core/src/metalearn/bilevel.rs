use super::{AdaptConfig, Context, GridLoss, MetaError, Model};
use crate::dataset::Composition;
use crate::diffcore::{
    evaluate, hessian_vector_product, value_and_gradient, Dual, ParamTree, ParamVars, Tape, TapeFunction, Tensor, TensorError,
    Var,
};
use crate::encoder::{argmax_rows, score_tape};
use crate::sampler::Episode;

/// Result of the inner loop: `θ′`, the iterates it passed through and the
/// support loss at each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub theta: ParamTree,
    pub trajectory: Vec<ParamTree>,
    pub losses: Vec<f64>,
}

/// `steps` full-batch gradient steps `θ ← θ − ε ∇L(θ)`; `theta` is not
/// touched.
pub fn inner_adapt<F: TapeFunction<f64>>(
    f: &F,
    theta: &ParamTree,
    inputs: &[Tensor],
    epsilon: f64,
    steps: usize,
) -> Result<Adapted, TensorError> {
    let mut cur = theta.clone();
    let mut trajectory = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, g) = value_and_gradient(f, &cur, inputs)?;
        losses.push(loss);
        let next = {
            let mut n = cur.clone();
            n.axpy(-epsilon, &g)?;
            n
        };
        trajectory.push(std::mem::replace(&mut cur, next));
    }
    Ok(Adapted { theta: cur, trajectory, losses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterGradient {
    pub grad: ParamTree,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub adapted: ParamTree,
}

/// Gradient of `L_Q(θ′)` with respect to `θ`, where `θ′` comes from
/// [`inner_adapt`] on `L_S`. First-order mode returns `∇L_Q(θ′)` as is;
/// second-order mode pulls it back through every inner step with exact
/// Hessian-vector products, `v ← v − ε H_S(θ_t) v`.
pub fn outer_gradient<FS, FQ>(
    fs: &FS,
    s_inputs: &[Tensor],
    fq: &FQ,
    q_inputs: &[Tensor],
    theta: &ParamTree,
    adapt: &AdaptConfig,
    second_order: bool,
) -> Result<OuterGradient, TensorError>
where
    FS: TapeFunction<f64> + TapeFunction<Dual>,
    FQ: TapeFunction<f64>,
{
    let a = inner_adapt(fs, theta, s_inputs, adapt.epsilon, adapt.inner_steps)?;
    let (outer_loss, mut v) = value_and_gradient(fq, &a.theta, q_inputs)?;
    if second_order {
        for th in a.trajectory.iter().rev() {
            let (_, hv) = hessian_vector_product(fs, th, s_inputs, &v)?;
            v.axpy(-adapt.epsilon, &hv)?;
        }
    }
    let inner_loss = match a.losses.first() {
        Some(&l) => l,
        None => evaluate(fs, theta, s_inputs)?.data()[0],
    };
    Ok(OuterGradient { grad: v, inner_loss, outer_loss, adapted: a.theta })
}

/// Adapts on the support set, then predicts every query sample by argmax
/// over the episode grid. `model` is left untouched.
pub fn infer_episode(ctx: &Context, model: &Model, adapt: &AdaptConfig, episode: &Episode) -> Result<Vec<Composition>, MetaError> {
    let (a_hat, v0) = ctx.graph_inputs(episode)?;
    let (n1, n2) = (episode.p1.len(), episode.p2.len());
    let layers = model.config.gcn.layers;
    let (sf, st) = ctx.support_batch(episode);
    let loss = GridLoss { targets: &st, n1, n2, gcn_layers: layers };
    let adapted = inner_adapt(&loss, &model.theta, &[a_hat.clone(), v0.clone(), sf], adapt.epsilon, adapt.inner_steps)?;
    let (qf, _) = ctx.query_batch(episode);
    let score = |t: &mut Tape, p: &ParamVars, x: &[Var]| score_tape(t, p, x[0], x[1], x[2], n1, n2, layers);
    let scores = evaluate(&score, &adapted.theta, &[a_hat, v0, qf])?;
    Ok(argmax_rows(&scores).into_iter().map(|k| episode.grid_composition(k)).collect())
}
