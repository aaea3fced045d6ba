//! Token embeddings (static + character CNN + contextual) and the stacked
//! BiLSTM that turns them into token representations.

use bridging_autodiff::{Real, Tape, Tensor, Var};

use crate::config::ContextualMode;
use crate::corpus::Document;
use crate::error::{BridgingError, Result};
use crate::model::{Dense, Dropout, DropoutSite, Features, Model};

/// Character-CNN vectors `[tokens.len(), char_width]` for a batch of tokens.
///
/// Each token is convolved separately for every filter width, max-pooled over
/// time and passed through a ReLU; tokens shorter than a filter are zero-padded.
pub fn char_cnn_embed<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    tokens: &[&str],
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(tokens.len());
    for token in tokens {
        let start = ids.len();
        ids.extend(token.chars().map(|c| model.chars.id(c)));
        if ids.len() == start {
            ids.push(0);
        }
        segments.push((start, ids.len() - start));
    }
    let table = tape.param(model.layout.char_table);
    let chars = tape.embedding_lookup(table, &ids)?;
    let mut pooled = Vec::with_capacity(model.layout.char_convs.len());
    for (&width, conv) in model
        .config
        .encoder
        .char_filter_widths
        .iter()
        .zip(&model.layout.char_convs)
    {
        let (w, b) = (tape.param(conv.w), tape.param(conv.b));
        pooled.push(tape.conv1d_max_pool(chars, w, b, width, &segments)?);
    }
    let joined = tape.concat(&pooled, 1)?;
    Ok(tape.relu(joined)?)
}

/// `emb_t` for every token of `doc`: `[T, embedding_width]`.
pub fn embed_tokens<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    doc: &Document,
    features: &Features<'_>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let enc = &model.config.encoder;
    let tokens: Vec<&str> = doc.tokens().collect();
    let n = tokens.len();
    let mut parts = Vec::with_capacity(3);

    if enc.static_dim > 0 {
        let vectors = features.static_vectors.ok_or_else(|| {
            BridgingError::Config("static vectors are required by this model".into())
        })?;
        let mut data = Vec::with_capacity(n * enc.static_dim);
        for t in &tokens {
            data.extend(vectors.get(t).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        parts.push(tape.constant(Tensor::matrix(n, enc.static_dim, data)?)?);
    }

    parts.push(char_cnn_embed(model, tape, &tokens)?);

    if enc.contextual_dim > 0 {
        let rows = features
            .contextual
            .and_then(|c| c.get(&doc.id))
            .ok_or_else(|| BridgingError::Contextual {
                doc_id: doc.id.clone(),
                message: "no contextual vectors attached".into(),
            })?;
        if rows.len() != n {
            return Err(BridgingError::Contextual {
                doc_id: doc.id.clone(),
                message: format!("{} vectors for {n} tokens", rows.len()),
            });
        }
        let width = enc.contextual_width();
        let mut data = Vec::with_capacity(n * width);
        for row in rows {
            match enc.contextual_mode {
                ContextualMode::Concat => {
                    data.extend(row.iter().map(|&v| T::from_f64_lossy(v as f64)))
                }
                ContextualMode::Mean => {
                    let layers = enc.contextual_layers;
                    for k in 0..width {
                        let sum: f64 = (0..layers).map(|l| row[l * width + k] as f64).sum();
                        data.push(T::from_f64_lossy(sum / layers as f64));
                    }
                }
            }
        }
        parts.push(tape.constant(Tensor::matrix(n, width, data)?)?);
    }

    let emb = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    dropout.apply(tape, emb, DropoutSite::Embedding)
}

fn run_direction<T: Real>(
    tape: &mut Tape<'_, T>,
    input: Var,
    len: usize,
    hidden: usize,
    cell: Dense,
    reverse: bool,
) -> Result<Var> {
    let (w, b) = (tape.param(cell.w), tape.param(cell.b));
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]))?;
    let mut c = h;
    let mut rows = vec![h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        let x = tape.gather_rows(input, &[t])?;
        let hc = tape.lstm_cell(x, h, c, w, b)?;
        h = tape.slice_cols(hc, 0, hidden)?;
        c = tape.slice_cols(hc, hidden, hidden)?;
        rows[t] = h;
    }
    Ok(tape.concat(&rows, 0)?)
}

/// `x_t` for every token: `[T, 2 * lstm_hidden]`.
///
/// Each sentence is encoded on its own, starting from a zero state in both
/// directions; dropout sits between stacked layers.
pub fn encode_document<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    doc: &Document,
    embedded: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let hidden = model.config.encoder.lstm_hidden;
    let layers = &model.layout.lstm;
    let mut sentences = Vec::with_capacity(doc.sentences.len());
    for (start, len) in doc.sentence_spans() {
        let rows: Vec<usize> = (start..start + len).collect();
        let mut input = tape.gather_rows(embedded, &rows)?;
        for (l, [fw, bw]) in layers.iter().enumerate() {
            let f = run_direction(tape, input, len, hidden, *fw, false)?;
            let b = run_direction(tape, input, len, hidden, *bw, true)?;
            input = tape.concat(&[f, b], 1)?;
            if l + 1 < layers.len() {
                input = dropout.apply(tape, input, DropoutSite::Lstm)?;
            }
        }
        sentences.push(input);
    }
    Ok(tape.concat(&sentences, 0)?)
}
