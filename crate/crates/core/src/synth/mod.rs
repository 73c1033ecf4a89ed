//! Synthetic worlds, augmentations, the frozen graph realizer and the
//! template question corpus.

pub mod augment;
pub mod corpus;
pub mod qa;
pub mod realize;
pub mod scene;
pub mod vocab;

pub use augment::{augment_scene, Augmentation};
pub use corpus::{build_corpus, load_corpus, write_corpus, Corpus, CorpusConfig, Manifest, Split};
pub use qa::{generate_qa, generate_template, oracle_answer, parse_question, GeneratedQa, QAItem, QType, Template};
pub use realize::{GraphEdge, GraphNode, RealizeNoise, Realizer, SceneGraph};
pub use scene::{derive_relations, sample_scene, Object, Predicate, Relation, SceneSpec};
pub use vocab::Vocab;
