//! Central finite differences over small random networks.

use protoclean::cpc::{self, Member, PrototypeBank, Role};
use protoclean::nnet::{Architecture, Gradients, Network, ParamGroups, Upstream};
use protoclean::rng::{self, Rng};
use protoclean::semisup::{self, MixConfig};
use protoclean::trainer::warmup_loss_and_grads;
use rand::Rng as _;

const EPS: f64 = 1e-5;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn numeric_wrt_params(net: &Network, groups: ParamGroups, loss: impl Fn(&Network) -> f64) -> Vec<f64> {
    let n = net.params().values(groups).count();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut plus = net.clone();
        *plus.params_mut().values_mut(groups).nth(j).unwrap() += EPS;
        let mut minus = net.clone();
        *minus.params_mut().values_mut(groups).nth(j).unwrap() -= EPS;
        out.push((loss(&plus) - loss(&minus)) / (2.0 * EPS));
    }
    out
}

pub fn numeric_wrt_vec(x: &[f64], loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut p = x.to_vec();
            p[j] += EPS;
            let mut m = x.to_vec();
            m[j] -= EPS;
            (loss(&p) - loss(&m)) / (2.0 * EPS)
        })
        .collect()
}

pub fn analytic(grads: &Gradients, groups: ParamGroups) -> Vec<f64> {
    grads.values(groups).copied().collect()
}

pub struct Case {
    pub net: Network,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub rng: Rng,
}

pub fn case(seed: u64) -> Case {
    let mut rng = rng::seeded(seed, 99);
    let input_dim = rng.random_range(2..6);
    let depth = rng.random_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(4..9)).collect();
    let num_classes = rng.random_range(2..6);
    let proj_dim = rng.random_range(1..*hidden.last().unwrap());
    let proj_hidden = if rng.random_bool(0.5) { vec![rng.random_range(3..7)] } else { vec![] };
    let arch = Architecture {
        input_dim,
        hidden,
        num_classes,
        proj_dim,
        proj_hidden,
    };
    let net = Network::new(arch, &mut rng).unwrap();
    let n = rng.random_range(3..8);
    let inputs = (0..n)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    Case { net, inputs, labels, rng }
}

pub fn random_bank(k: usize, d: usize, rng: &mut Rng) -> PrototypeBank {
    let mut bank = PrototypeBank::new(k, d, 0.5, rng.random_range(0.2..1.5)).unwrap();
    for c in bank.prototypes_mut() {
        *c = rng.random_range(-1.5..1.5);
    }
    bank
}

pub fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Worst relative error of the warm-up objective, with and without the
/// confidence penalty.
pub fn cross_entropy(seed: u64) -> Vec<(String, f64)> {
    let c = case(seed);
    let mut out = Vec::new();
    for penalty in [0.0, 0.7] {
        let xs = refs(&c.inputs);
        let (_, grads) = warmup_loss_and_grads(&c.net, &xs, &c.labels, penalty).unwrap();
        let groups = ParamGroups::CLASSIFIER_PATH;
        let num = numeric_wrt_params(&c.net, groups, |n| {
            warmup_loss_and_grads(n, &xs, &c.labels, penalty).unwrap().0
        });
        assert!(grads.values(ParamGroups::PROJECTOR).all(|g| *g == 0.0));
        out.push((format!("cross-entropy penalty {penalty}"), rel_err(&analytic(&grads, groups), &num)));
    }
    out
}

type SetLoss = fn(&[Member<'_>], &PrototypeBank) -> protoclean::Result<cpc::CpcLoss>;

/// Clean, noise and confident set losses against prototypes and embeddings.
pub fn prototype_sets(seed: u64) -> Vec<(String, f64)> {
    let losses: [(&str, SetLoss); 3] = [
        ("clean", cpc::loss_clean_set),
        ("noise", cpc::loss_noise_set),
        ("confident", cpc::loss_confident_set),
    ];
    let mut c = case(seed);
    let k = c.net.arch().num_classes;
    let d = c.net.arch().proj_dim;
    let bank = random_bank(k, d, &mut c.rng);
    let emb: Vec<Vec<f64>> = c
        .labels
        .iter()
        .map(|_| (0..d).map(|_| c.rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut out = Vec::new();
    for (name, f) in losses {
        let members: Vec<Member<'_>> = emb
            .iter()
            .zip(&c.labels)
            .map(|(e, &label)| Member { embedding: e, label })
            .collect();
        let l = f(&members, &bank).unwrap();

        let num_c = numeric_wrt_vec(bank.prototypes(), |p| {
            let mut b = bank.clone();
            b.prototypes_mut().copy_from_slice(p);
            f(&members, &b).unwrap().value
        });
        out.push((format!("{name} set, prototypes"), rel_err(&l.grad_prototypes, &num_c)));

        let mut worst = 0.0f64;
        for i in 0..emb.len() {
            let num_e = numeric_wrt_vec(&emb[i], |v| {
                let mut ms = members.clone();
                ms[i] = Member { embedding: v, label: c.labels[i] };
                f(&ms, &bank).unwrap().value
            });
            worst = worst.max(rel_err(&l.grad_embeddings[i], &num_e));
        }
        out.push((format!("{name} set, embeddings"), worst));
    }
    out
}

pub fn random_roles(n: usize, k: usize, rng: &mut Rng) -> Vec<Role> {
    (0..n)
        .map(|_| {
            let clean = rng.random_bool(0.5);
            Role {
                clean,
                noise: !clean,
                pseudo_label: (!clean && rng.random_bool(0.6)).then(|| rng.random_range(0..k)),
            }
        })
        .collect()
}

/// The summed cleaner objective through the projector, for projector
/// weights and prototypes together.
pub fn cleaner_objective(seed: u64) -> Vec<(String, f64)> {
    let mut c = case(seed);
    let k = c.net.arch().num_classes;
    let d = c.net.arch().proj_dim;
    let bank = random_bank(k, d, &mut c.rng);
    let roles = random_roles(c.inputs.len(), k, &mut c.rng);
    let objective = |net: &Network, bank: &PrototypeBank| {
        let emb: Vec<Vec<f64>> = c.inputs.iter().map(|x| net.forward(x).unwrap().embedding).collect();
        cpc::cpc_objective(&refs(&emb), &c.labels, &roles, bank).unwrap()
    };

    let outs: Vec<_> = c.inputs.iter().map(|x| c.net.forward(x).unwrap()).collect();
    let emb: Vec<Vec<f64>> = outs.iter().map(|o| o.embedding.clone()).collect();
    let obj = cpc::cpc_objective(&refs(&emb), &c.labels, &roles, &bank).unwrap();
    let mut grads = c.net.zero_grads();
    for (o, g) in outs.iter().zip(&obj.grad_embeddings) {
        c.net
            .backward_into(
                o,
                Upstream {
                    d_logits: None,
                    d_embedding: Some(g),
                },
                true,
                &mut grads,
            )
            .unwrap();
    }
    assert!(grads.values(ParamGroups::CLASSIFIER_PATH).all(|g| *g == 0.0));
    let parts = obj.clean + obj.noise + bank.alpha() * obj.confident;
    assert!((parts - obj.total).abs() < 1e-12);

    let num_w = numeric_wrt_params(&c.net, ParamGroups::PROJECTOR, |n| objective(n, &bank).total);
    let num_c = numeric_wrt_vec(bank.prototypes(), |p| {
        let mut b = bank.clone();
        b.prototypes_mut().copy_from_slice(p);
        objective(&c.net, &b).total
    });
    vec![
        ("cleaner objective, projector".into(), rel_err(&analytic(&grads, ParamGroups::PROJECTOR), &num_w)),
        ("cleaner objective, prototypes".into(), rel_err(&obj.grad_prototypes, &num_c)),
    ]
}

/// Mixed-batch risk with several weightings of the unlabeled and prior terms.
pub fn vicinal_risk(seed: u64) -> Vec<(String, f64)> {
    let mut c = case(seed);
    let k = c.net.arch().num_classes;
    let other = Network::new(c.net.arch().clone(), &mut c.rng).unwrap();
    let split = c.inputs.len().div_ceil(2);
    let clean: Vec<(&[f64], usize, f64)> = c.inputs[..split]
        .iter()
        .zip(&c.labels)
        .map(|(x, &y)| (x.as_slice(), y, 0.8))
        .collect();
    let noisy = refs(&c.inputs[split..]);
    let (lab, unl) = semisup::make_targets(&c.net, &other, &clean, &noisy, 0.5).unwrap();
    let batch = semisup::build_vicinal_batch(&lab, &unl, &MixConfig::default(), &mut c.rng).unwrap();
    assert!(batch.targets.iter().all(|t| t.len() == k));
    let mut out = Vec::new();
    for (lambda_u, lambda_r) in [(0.0, 0.0), (3.0, 0.0), (25.0, 0.0), (0.0, 1.0), (3.0, 2.0)] {
        let (_, grads) = semisup::evr_loss_and_grads(&c.net, &batch, lambda_u, lambda_r).unwrap();
        let groups = ParamGroups::CLASSIFIER_PATH;
        let num = numeric_wrt_params(&c.net, groups, |n| {
            semisup::evr_loss_and_grads(n, &batch, lambda_u, lambda_r).unwrap().0.total
        });
        out.push((
            format!("vicinal risk lambda_u {lambda_u} lambda_r {lambda_r}"),
            rel_err(&analytic(&grads, groups), &num),
        ));
    }
    out
}

/// Every checked loss on configuration `seed`.
pub fn all_losses(seed: u64) -> Vec<(String, f64)> {
    let mut out = cross_entropy(seed);
    out.extend(prototype_sets(seed));
    out.extend(cleaner_objective(seed));
    out.extend(vicinal_risk(seed));
    out
}
