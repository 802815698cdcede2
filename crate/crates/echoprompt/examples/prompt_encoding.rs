//! Enumerate the prompt space and show the one-hot wire format.
//!
//! ```sh
//! cargo run --example prompt_encoding
//! ```

use echoprompt::prompts::{
    decode_prompt_vector, encode_prompt_set, prompt_from_metadata, validate_prompt_vector,
    NaturePrompt, PositionPrompt, PromptSet, TaskPrompt, TypePrompt, PROMPT_DIM,
};

fn main() {
    // A prompt set is four categorical choices; its encoding is the
    // concatenation of four one-hot segments into a 15-dim vector.
    let prompt = PromptSet::new(
        NaturePrompt::Tumor,
        PositionPrompt::Breast,
        TaskPrompt::Segmentation,
        TypePrompt::Whole,
    );
    let vector = encode_prompt_set(&prompt);
    println!("prompt: {prompt:?}");
    println!("encoded ({PROMPT_DIM} dims): {:?}", vector.values());

    // Round trip: decode recovers the prompt, validation accepts it.
    validate_prompt_vector(vector.as_slice()).unwrap();
    assert_eq!(decode_prompt_vector(vector.as_slice()).unwrap(), prompt);

    // Anything that is not exactly one hot bit per segment is rejected.
    let mut broken = *vector.values();
    broken[3] = 1.0 - broken[3];
    println!("single bit flipped -> {:?}", validate_prompt_vector(&broken).unwrap_err());

    // Dataset metadata maps to prompts; unknown positions fall back to
    // the indiscriminate position bucket instead of failing.
    let oov = prompt_from_metadata(
        "rec-001",
        "spleen",
        "tumor",
        TaskPrompt::Classification,
        TypePrompt::Whole,
    )
    .unwrap();
    println!("metadata position \"spleen\" -> {:?}", oov.position);
    assert_eq!(oov.position, PositionPrompt::Indis);

    // The full space is small enough to enumerate.
    let all = PromptSet::all();
    println!("total prompt sets: {}", all.len());
    assert_eq!(all.len(), 96);
}
