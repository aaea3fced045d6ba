//! Head attention over span tokens and the mention representation
//! `[x_start, x_end, head, width]`.

use bridging_autodiff::{Real, Tape, Var};

use crate::corpus::Document;
use crate::error::{BridgingError, Result};
use crate::model::{feed_forward, linear, Dropout, Model};

pub const NUM_BUCKETS: usize = 10;

/// Buckets `[1] [2] [3] [4] [5-7] [8-15] [16-31] [32-63] [64-127] [128+]`.
pub fn bucket(value: usize) -> Result<usize> {
    match value {
        0 => Err(BridgingError::Bucket(value)),
        1..=4 => Ok(value - 1),
        _ => Ok(((value.ilog2() as usize) + 2).min(NUM_BUCKETS - 1)),
    }
}

/// Unnormalized head score `alpha_t` for every token: `[T, 1]`.
pub fn head_scores<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    encoded: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let hidden = feed_forward(tape, encoded, &model.layout.attention, dropout)?;
    linear(tape, hidden, model.layout.attention_out)
}

/// Softmax of `alpha` over tokens `start..=end` and the weighted sum of their
/// encodings. Returns `(weights [len, 1], head [1, width])`.
pub fn head_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    alpha: Var,
    encoded: Var,
    start: usize,
    end: usize,
) -> Result<(Var, Var)> {
    let span: Vec<usize> = (start..=end).collect();
    let scores = tape.gather_rows(alpha, &span)?;
    let weights = tape.softmax(scores, 0)?;
    let tokens = tape.gather_rows(encoded, &span)?;
    let row = tape.transpose(weights)?;
    let head = tape.matmul(row, tokens)?;
    Ok((weights, head))
}

/// `M_i` for every mention of `doc`: `[mentions, mention_width]`.
pub fn represent_mentions<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    doc: &Document,
    encoded: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let alpha = head_scores(model, tape, encoded, dropout)?;
    let mut heads = Vec::with_capacity(doc.mentions.len());
    for m in &doc.mentions {
        heads.push(head_attention(tape, alpha, encoded, m.start, m.end)?.1);
    }
    let heads = tape.concat(&heads, 0)?;
    let starts: Vec<usize> = doc.mentions.iter().map(|m| m.start).collect();
    let ends: Vec<usize> = doc.mentions.iter().map(|m| m.end).collect();
    let widths = doc
        .mentions
        .iter()
        .map(|m| bucket(m.width()))
        .collect::<Result<Vec<_>>>()?;
    let x_start = tape.gather_rows(encoded, &starts)?;
    let x_end = tape.gather_rows(encoded, &ends)?;
    let table = tape.param(model.layout.width_table);
    let width = tape.embedding_lookup(table, &widths)?;
    Ok(tape.concat(&[x_start, x_end, heads, width], 1)?)
}
