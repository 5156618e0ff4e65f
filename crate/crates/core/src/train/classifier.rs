//! Stand-alone expression classifier over a fixed word table.

use std::sync::Arc;

use crate::embedding::EmbeddingTable;
use crate::encoder::{
    classify, encode, encoder_gradients, tokenize, ClassDistribution, ClassifierParams, LstmParams,
    TokenSequence,
};
use crate::nn::Params;
use crate::synth::{derive_seed, rng_from_seed};
use crate::train::{Sgd, TrainConfig};
use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    pub lstm: LstmParams,
    pub classifier: ClassifierParams,
}

impl Params for ClassifierWeights {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut v = self.lstm.blocks();
        v.extend(self.classifier.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.lstm.blocks_mut();
        v.extend(self.classifier.blocks_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    pub embedding: Arc<EmbeddingTable>,
    pub weights: ClassifierWeights,
}

impl TextClassifier {
    pub fn distribution(&self, seq: &TokenSequence) -> Result<ClassDistribution, Error> {
        let h = encode(&self.weights.lstm, &self.embedding, seq)?;
        Ok(classify(&self.weights.classifier, &h)?)
    }

    pub fn predict(&self, expression: &str) -> Result<usize, Error> {
        Ok(self.distribution(&tokenize(expression)?)?.argmax())
    }

    /// Fraction of `(expression, label)` pairs classified correctly.
    pub fn accuracy(&self, items: &[(String, usize)]) -> Result<f64, Error> {
        if items.is_empty() {
            return Err(Error::Config("no items to score".into()));
        }
        let mut correct = 0usize;
        for (expr, label) in items {
            if self.predict(expr)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / items.len() as f64)
    }
}

/// Trains an LSTM + classifier on labelled expressions with the word
/// table held fixed. Uses the optimizer settings, epochs, batch size,
/// seed and hidden sizes of `config`. Returns the mean loss per epoch.
pub fn train_classifier(
    config: &TrainConfig,
    table: Arc<EmbeddingTable>,
    items: &[(String, usize)],
    classes: usize,
) -> Result<(TextClassifier, Vec<f64>), Error> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Config("no training expressions".into()));
    }
    let seqs: Vec<(TokenSequence, usize)> = items
        .iter()
        .map(|(e, l)| Ok((tokenize(e)?, *l)))
        .collect::<Result<_, Error>>()?;
    let mut rng = rng_from_seed(derive_seed(config.seed, 6));
    let d = table.dimension();
    let mut weights = ClassifierWeights {
        lstm: LstmParams::init(d, config.model.lstm_hidden, &mut rng),
        classifier: ClassifierParams::init(
            config.model.lstm_hidden,
            config.model.mlp_hidden,
            classes,
            &mut rng,
        ),
    };
    let mut sgd = Sgd::new(&weights, config.learning_rate, config.momentum);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        sgd.lr = config
            .lr_schedule
            .rate(config.learning_rate, epoch, config.epochs);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut shuffle_rng = rng_from_seed(derive_seed(derive_seed(config.seed, 7), epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = weights.zeros_like();
            for &i in batch {
                let (seq, label) = &seqs[i];
                let g = encoder_gradients(&weights.lstm, &weights.classifier, &table, seq, *label)?;
                total += g.loss;
                grads.lstm.add_scaled(&g.lstm, 1.0 / batch.len() as f64);
                grads
                    .classifier
                    .add_scaled(&g.classifier, 1.0 / batch.len() as f64);
            }
            sgd.step(&mut weights, &grads)?;
        }
        losses.push(total / seqs.len() as f64);
    }
    Ok((
        TextClassifier {
            embedding: table,
            weights,
        },
        losses,
    ))
}
