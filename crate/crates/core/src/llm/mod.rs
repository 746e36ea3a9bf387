//! Image-level labels from a vision LLM.
//!
//! Each patch is shown next to a legend of class symbols together with a fixed
//! question; the answer is parsed into one Yes/No per class. Raw answers are
//! cached by content hash so reruns never query the provider twice.

pub mod answer;
pub mod labeler;
pub mod prompt;
pub mod provider;

pub use answer::{format_answer, parse_answer, LlmAnswer, Verdict};
pub use labeler::{label_patches, CacheEntry, LabelOutcome, LabelerConfig, PatchSource, ResponseCache};
pub use prompt::{build_prompt, PromptBundle, PROMPT_TEMPLATE, SEPARATOR_PX};
pub use provider::{MaskOracle, OpenAiProvider, Provider, ProviderConfig, ReplayProvider};
