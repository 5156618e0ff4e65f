//! Expression side: tokenizer, a from-scratch LSTM, and the two-layer
//! classifier that maps the final hidden state to a class distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingTable;
use crate::nn::{relu, sigmoid, softmax, Matrix, Params};
use crate::train::loss::cross_entropy_loss;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("expression has no tokens")]
    EmptyExpression,
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("embedding dimension {table} does not match LSTM input dimension {lstm}")]
    DimensionMismatch { table: usize, lstm: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), EncoderError> {
    if expected == found {
        Ok(())
    } else {
        Err(EncoderError::ShapeMismatch {
            what,
            expected,
            found,
        })
    }
}

const PUNCTUATION: [char; 8] = ['.', ',', ':', ';', '!', '?', '\'', '"'];

/// Non-empty sequence of lowercase tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps pre-split tokens, enforcing the tokenizer's invariants.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self, EncoderError> {
        tokenize(
            &tokens
                .iter()
                .map(|t| t.as_ref())
                .collect::<Vec<_>>()
                .join(" "),
        )
    }
}

/// Lowercases, splits on whitespace, and makes each of `. , : ; ! ? ' "`
/// a token of its own.
pub fn tokenize(text: &str) -> Result<TokenSequence, EncoderError> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if PUNCTUATION.contains(&ch) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(EncoderError::EmptyExpression);
    }
    Ok(TokenSequence(tokens))
}

/// One LSTM gate: weights over `[x; h]` plus bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gate order is input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gates: [Gate; 4],
}

const INPUT: usize = 0;
const FORGET: usize = 1;
const OUTPUT: usize = 2;
const CANDIDATE: usize = 3;

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let gate = || Gate {
            weights: Matrix::zeros(hidden_dim, input_dim + hidden_dim),
            bias: vec![0.0; hidden_dim],
        };
        Self {
            input_dim,
            hidden_dim,
            gates: [gate(), gate(), gate(), gate()],
        }
    }

    /// Glorot-uniform weights, forget bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        for g in &mut p.gates {
            g.weights = Matrix::glorot(
                hidden_dim,
                input_dim + hidden_dim,
                input_dim + hidden_dim,
                hidden_dim,
                rng,
            );
        }
        p.gates[FORGET].bias.fill(1.0);
        p
    }
}

impl Params for LstmParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(8);
        for g in &self.gates {
            v.push(&g.weights.data);
            v.push(&g.bias);
        }
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(8);
        for g in &mut self.gates {
            v.push(&mut g.weights.data);
            v.push(&mut g.bias);
        }
        v
    }
}

/// Intermediate values of one step, kept for back-propagation.
#[derive(Clone, Debug)]
struct StepCache {
    xh: Vec<f64>,
    gates: [Vec<f64>; 4],
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct LstmTrace {
    steps: Vec<StepCache>,
}

fn step_cached(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> StepCache {
    let hd = p.hidden_dim;
    let mut xh = Vec::with_capacity(p.input_dim + hd);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h);
    let gates: [Vec<f64>; 4] = std::array::from_fn(|k| {
        let mut a = p.gates[k].bias.clone();
        p.gates[k].weights.matvec_acc(&xh, &mut a);
        if k == CANDIDATE {
            a.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            a.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        a
    });
    let c_new: Vec<f64> = (0..hd)
        .map(|j| gates[FORGET][j] * c[j] + gates[INPUT][j] * gates[CANDIDATE][j])
        .collect();
    StepCache {
        xh,
        gates,
        c_prev: c.to_vec(),
        c: c_new,
    }
}

fn hidden_of(cache: &StepCache) -> Vec<f64> {
    cache
        .c
        .iter()
        .zip(&cache.gates[OUTPUT])
        .map(|(c, o)| o * c.tanh())
        .collect()
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
    check_len("lstm input", params.input_dim, x.len())?;
    check_len("lstm hidden state", params.hidden_dim, h.len())?;
    check_len("lstm cell state", params.hidden_dim, c.len())?;
    let cache = step_cached(params, x, h, c);
    Ok((hidden_of(&cache), cache.c))
}

/// Runs the LSTM from zero state over `inputs`; returns the final hidden state.
pub fn run_lstm(
    params: &LstmParams,
    inputs: &[&[f64]],
) -> Result<(Vec<f64>, LstmTrace), EncoderError> {
    let hd = params.hidden_dim;
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut trace = LstmTrace {
        steps: Vec::with_capacity(inputs.len()),
    };
    for x in inputs {
        check_len("lstm input", params.input_dim, x.len())?;
        let cache = step_cached(params, x, &h, &c);
        h = hidden_of(&cache);
        c.clone_from(&cache.c);
        trace.steps.push(cache);
    }
    Ok((h, trace))
}

/// Back-propagation through time. Accumulates parameter gradients into
/// `grads` and returns `dL/dx_t` for every step.
pub fn lstm_backward(
    params: &LstmParams,
    trace: &LstmTrace,
    dh_final: &[f64],
    grads: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let hd = params.hidden_dim;
    let d = params.input_dim;
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; hd];
    let mut dxs = vec![Vec::new(); trace.steps.len()];
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hd]);
    for (t, s) in trace.steps.iter().enumerate().rev() {
        let (i, f, o, g) = (
            &s.gates[INPUT],
            &s.gates[FORGET],
            &s.gates[OUTPUT],
            &s.gates[CANDIDATE],
        );
        for j in 0..hd {
            let tc = s.c[j].tanh();
            let d_o = dh[j] * tc;
            dc[j] += dh[j] * o[j] * (1.0 - tc * tc);
            let d_i = dc[j] * g[j];
            let d_g = dc[j] * i[j];
            let d_f = dc[j] * s.c_prev[j];
            da[INPUT][j] = d_i * i[j] * (1.0 - i[j]);
            da[FORGET][j] = d_f * f[j] * (1.0 - f[j]);
            da[OUTPUT][j] = d_o * o[j] * (1.0 - o[j]);
            da[CANDIDATE][j] = d_g * (1.0 - g[j] * g[j]);
            dc[j] *= f[j];
        }
        let mut dxh = vec![0.0; d + hd];
        for k in 0..4 {
            grads.gates[k].weights.outer_acc(&da[k], &s.xh);
            for (b, v) in grads.gates[k].bias.iter_mut().zip(&da[k]) {
                *b += v;
            }
            params.gates[k].weights.matvec_t_acc(&da[k], &mut dxh);
        }
        dh = dxh.split_off(d);
        dxs[t] = dxh;
    }
    dxs
}

/// Final hidden state after feeding each token's embedding.
pub fn encode(
    params: &LstmParams,
    table: &EmbeddingTable,
    seq: &TokenSequence,
) -> Result<Vec<f64>, EncoderError> {
    Ok(encode_traced(params, table, seq)?.0)
}

pub(crate) fn encode_traced(
    params: &LstmParams,
    table: &EmbeddingTable,
    seq: &TokenSequence,
) -> Result<(Vec<f64>, LstmTrace), EncoderError> {
    if table.dimension() != params.input_dim {
        return Err(EncoderError::DimensionMismatch {
            table: table.dimension(),
            lstm: params.input_dim,
        });
    }
    let inputs: Vec<&[f64]> = seq
        .tokens()
        .iter()
        .map(|t| table.lookup(t).expect("tokens are non-empty"))
        .collect();
    run_lstm(params, &inputs)
}

/// Probability vector over `M` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Option<Self> {
        let ok = !probs.is_empty()
            && probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        ok.then_some(Self(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn one_hot(classes: usize, k: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[k] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Hidden ReLU layer followed by an `M`-way softmax layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            hidden: Matrix::zeros(hidden, input),
            hidden_bias: vec![0.0; hidden],
            output: Matrix::zeros(classes, hidden),
            output_bias: vec![0.0; classes],
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            hidden: Matrix::glorot(hidden, input, input, hidden, rng),
            hidden_bias: vec![0.0; hidden],
            output: Matrix::glorot(classes, hidden, hidden, classes, rng),
            output_bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.output.rows
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.cols
    }
}

impl Params for ClassifierParams {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.hidden.data,
            &self.hidden_bias,
            &self.output.data,
            &self.output_bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.hidden.data,
            &mut self.hidden_bias,
            &mut self.output.data,
            &mut self.output_bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ClassifierTrace {
    pub(crate) fn fold_pattern(&self, hash: &mut u64) {
        crate::nn::fold_pattern(hash, &self.hidden);
    }
}

pub(crate) fn classify_traced(
    cls: &ClassifierParams,
    h: &[f64],
) -> Result<(ClassDistribution, ClassifierTrace), EncoderError> {
    check_len("classifier input", cls.input_dim(), h.len())?;
    let mut hidden = cls.hidden_bias.clone();
    cls.hidden.matvec_acc(h, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = relu(*v));
    let mut logits = cls.output_bias.clone();
    cls.output.matvec_acc(&hidden, &mut logits);
    let dist = ClassDistribution::from_logits(&logits);
    Ok((
        dist,
        ClassifierTrace {
            input: h.to_vec(),
            hidden,
            logits,
        },
    ))
}

pub fn classify(cls: &ClassifierParams, h: &[f64]) -> Result<ClassDistribution, EncoderError> {
    Ok(classify_traced(cls, h)?.0)
}

/// Accumulates gradients given `dL/dlogits`; returns `dL/dh`.
pub(crate) fn classifier_backward(
    cls: &ClassifierParams,
    trace: &ClassifierTrace,
    dlogits: &[f64],
    grads: &mut ClassifierParams,
) -> Vec<f64> {
    grads.output.outer_acc(dlogits, &trace.hidden);
    for (b, d) in grads.output_bias.iter_mut().zip(dlogits) {
        *b += d;
    }
    let mut dhidden = vec![0.0; trace.hidden.len()];
    cls.output.matvec_t_acc(dlogits, &mut dhidden);
    for (d, a) in dhidden.iter_mut().zip(&trace.hidden) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    grads.hidden.outer_acc(&dhidden, &trace.input);
    for (b, d) in grads.hidden_bias.iter_mut().zip(&dhidden) {
        *b += d;
    }
    let mut dh = vec![0.0; trace.input.len()];
    cls.hidden.matvec_t_acc(&dhidden, &mut dh);
    dh
}

/// Gradients of the cross-entropy loss for one labelled expression.
#[derive(Clone, Debug)]
pub struct EncoderGradients {
    pub loss: f64,
    pub lstm: LstmParams,
    pub classifier: ClassifierParams,
    /// `dL/d embedding` per token position, in sequence order.
    pub token_grads: Vec<Vec<f64>>,
}

pub fn encoder_gradients(
    params: &LstmParams,
    cls: &ClassifierParams,
    table: &EmbeddingTable,
    seq: &TokenSequence,
    label: usize,
) -> Result<EncoderGradients, EncoderError> {
    let (h, lstm_trace) = encode_traced(params, table, seq)?;
    let (dist, cls_trace) = classify_traced(cls, &h)?;
    let (loss, dlogits) = cross_entropy_loss(&dist, label)?;
    let mut cls_grads = cls.zeros_like();
    let dh = classifier_backward(cls, &cls_trace, &dlogits, &mut cls_grads);
    let mut lstm_grads = params.zeros_like();
    let token_grads = lstm_backward(params, &lstm_trace, &dh, &mut lstm_grads);
    Ok(EncoderGradients {
        loss,
        lstm: lstm_grads,
        classifier: cls_grads,
        token_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn tokenizes_example_expressions() {
        let t = tokenize("The girl with red tie").unwrap();
        assert_eq!(t.tokens(), ["the", "girl", "with", "red", "tie"]);
        let t = tokenize("12 : 00").unwrap();
        assert_eq!(t.tokens(), ["12", ":", "00"]);
        let t = tokenize("it's \"big\", ok?").unwrap();
        assert_eq!(
            t.tokens(),
            ["it", "'", "s", "\"", "big", "\"", ",", "ok", "?"]
        );
        assert_eq!(tokenize("   "), Err(EncoderError::EmptyExpression));
        assert_eq!(tokenize(""), Err(EncoderError::EmptyExpression));
    }

    #[test]
    fn zero_lstm_from_zero_state_stays_zero() {
        let p = LstmParams::zeros(3, 4);
        let (h, c) = lstm_step(&p, &[0.3, -1.0, 2.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn zero_lstm_halves_unit_cell() {
        let p = LstmParams::zeros(2, 3);
        let (h, c) = lstm_step(&p, &[1.0, 1.0], &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(c, vec![0.5; 3]);
        for v in h {
            assert!((v - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
            assert!((v - 0.23105).abs() < 1e-5);
        }
    }

    #[test]
    fn step_rejects_wrong_input_length() {
        let p = LstmParams::zeros(2, 3);
        assert!(matches!(
            lstm_step(&p, &[1.0], &[0.0; 3], &[0.0; 3]),
            Err(EncoderError::ShapeMismatch {
                expected: 2,
                found: 1,
                ..
            })
        ));
    }

    #[test]
    fn cell_state_grows_by_at_most_one() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let p = LstmParams::init(4, 5, &mut rng);
        let c = vec![2.0, -3.0, 0.5, 0.0, -0.1];
        let (_, c2) = lstm_step(&p, &[1.0, -2.0, 0.3, 4.0], &[0.2; 5], &c).unwrap();
        for (a, b) in c2.iter().zip(&c) {
            assert!(a.abs() <= b.abs() + 1.0);
        }
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::parse_str("red 0.1 0.2 0.3 0.4\ncircle -0.5 0.1 0.0 0.9\nleft 1 0 0 -1\n")
            .unwrap()
    }

    #[test]
    fn single_token_encode_is_one_step() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let p = LstmParams::init(4, 4, &mut rng);
        let t = table();
        let seq = tokenize("circle").unwrap();
        let h = encode(&p, &t, &seq).unwrap();
        let (h1, _) = lstm_step(&p, t.lookup("circle").unwrap(), &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, h1);
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let p = LstmParams::zeros(4, 6);
        let h = encode(&p, &table(), &tokenize("left red circle").unwrap()).unwrap();
        assert_eq!(h, vec![0.0; 6]);
    }

    #[test]
    fn word_order_matters() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let p = LstmParams::init(4, 4, &mut rng);
        let a = encode(&p, &table(), &tokenize("left circle").unwrap()).unwrap();
        let b = encode(&p, &table(), &tokenize("circle left").unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_rejects_dimension_mismatch() {
        let p = LstmParams::zeros(3, 2);
        assert_eq!(
            encode(&p, &table(), &tokenize("red").unwrap()),
            Err(EncoderError::DimensionMismatch { table: 4, lstm: 3 })
        );
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let c = ClassifierParams::zeros(5, 3, 4);
        let d = classify(&c, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(d.probs(), &[0.25; 4]);
    }

    #[test]
    fn output_bias_gradient_is_p_minus_onehot() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let p = LstmParams::init(4, 4, &mut rng);
        let c = ClassifierParams::init(4, 4, 3, &mut rng);
        let t = table();
        let seq = tokenize("left red circle").unwrap();
        let g = encoder_gradients(&p, &c, &t, &seq, 2).unwrap();
        let dist = classify(&c, &encode(&p, &t, &seq).unwrap()).unwrap();
        for k in 0..3 {
            let expected = dist.probs()[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((g.classifier.output_bias[k] - expected).abs() < 1e-15);
        }
        assert!((g.loss + dist.probs()[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn class_distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_some());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_none());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_none());
        assert_eq!(ClassDistribution::one_hot(3, 1).argmax(), 1);
    }
}
