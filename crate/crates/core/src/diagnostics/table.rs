//! Tab-separated token tables.
//!
//! Header (one record per line):
//!
//! ```text
//! image_id  position  layer  layer_depth  token_type  density  teacher_attention  drift  mask_importance
//! ```
//!
//! `token_type` is `visual` or `text`; an empty `mask_importance` means not measured.

use std::io::{Read, Write};

use super::TokenRecord;

pub const COLUMNS: [&str; 9] = [
    "image_id",
    "position",
    "layer",
    "layer_depth",
    "token_type",
    "density",
    "teacher_attention",
    "drift",
    "mask_importance",
];

pub fn write_tokens<W: Write>(out: W, records: &[TokenRecord]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    if records.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tokens<R: Read>(input: R) -> csv::Result<Vec<TokenRecord>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_reader(input)
        .deserialize()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::TokenType;

    #[test]
    fn round_trip() {
        let records = vec![
            TokenRecord {
                image_id: 3,
                position: 7,
                layer: 2,
                layer_depth: 0.5,
                token_type: TokenType::Visual,
                density: 0.25,
                teacher_attention: 0.125,
                drift: 1.5,
                mask_importance: Some(-0.01),
            },
            TokenRecord {
                image_id: 3,
                position: 40,
                layer: 1,
                layer_depth: 0.0,
                token_type: TokenType::Text,
                density: 1.0,
                teacher_attention: 0.0,
                drift: 0.0,
                mask_importance: None,
            },
        ];
        let mut buf = Vec::new();
        write_tokens(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join("\t"));
        assert!(text.lines().nth(2).unwrap().ends_with("\t"));
        assert_eq!(read_tokens(buf.as_slice()).unwrap(), records);

        let mut empty = Vec::new();
        write_tokens(&mut empty, &[]).unwrap();
        assert!(read_tokens(empty.as_slice()).unwrap().is_empty());
    }
}
