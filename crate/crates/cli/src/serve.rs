use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use bendlab_core::build_toy_pipeline;
use bendlab_core::service::{ApiRequest, Service};

use crate::CliError;

async fn dispatch(
    State(service): State<Arc<Service>>,
    method: Method,
    uri: Uri,
    Query(query): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> Response {
    let mut req = ApiRequest::new(method.as_str(), uri.path()).with_body(body.to_vec());
    req.query = query;
    // generation and capture requests block for the length of a run
    let result = tokio::task::spawn_blocking(move || service.handle(&req)).await;
    match result {
        Ok(resp) => {
            let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, [(header::CONTENT_TYPE, resp.content_type)], resp.body).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, format!("handler failed: {e}")).into_response(),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new().fallback(dispatch).with_state(service)
}

pub fn run(host: &str, port: u16, model_seed: u64) -> Result<(), CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();

        let service = Arc::new(Service::new(build_toy_pipeline(model_seed)));
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
    })
}
