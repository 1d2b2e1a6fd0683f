#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use interassort_service::datastore::{ingest_catalog, ingest_parameters, Store};
use interassort_service::http;
use interassort_service::orchestrator::Planner;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_store() -> Arc<Store> {
    let dir = fixture_dir().join("ta-feng");
    let store = Store::in_memory();
    let catalog_path = dir.join("catalog.csv");
    let catalog = ingest_catalog(&catalog_path, "ta-feng").unwrap();
    store
        .put_catalog(catalog, &catalog_path.display().to_string())
        .unwrap();
    for parsed in ingest_parameters(&dir.join("parameters.csv")).unwrap() {
        store.put_parameters(&parsed.key, parsed.params).unwrap();
    }
    Arc::new(store)
}

/// Starts the HTTP API on an ephemeral port and returns its base URL.
pub fn spawn_server(planner: Arc<Planner>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        runtime.block_on(async move {
            let (listener, addr) = http::bind(([127, 0, 0, 1], 0).into()).await.unwrap();
            tx.send(addr).unwrap();
            http::serve(listener, planner, std::future::pending())
                .await
                .unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
