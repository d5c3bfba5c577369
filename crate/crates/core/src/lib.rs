//! Darknet traffic characterization: pcap ingestion and mergeable per-file
//! accumulators for overview statistics, entropy, inter-arrival burstiness,
//! scan-gap classification, ICS port targeting, geolocation and a volumetric
//! IDS simulation, plus a seeded traffic generator.

pub mod entropy;
pub mod geo;
pub mod iat;
pub mod ics;
pub mod ids;
pub mod overview;
pub mod packet_io;
pub mod pipeline;
pub mod report;
pub mod scan_gap;
pub mod synth;
