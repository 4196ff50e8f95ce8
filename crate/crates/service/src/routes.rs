use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use topicswitch_core::eval::{write_ratings_csv, EvalError, RatingRecord};
use topicswitch_core::runtime::{chat_turn, TurnOptions};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::CorsOrigins;
use crate::error::{parse_body, ApiError};
use crate::session::{Reply, TurnRecord};
use crate::state::{now_ms, AppState};
use crate::store::{CloseReason, Event};

pub fn router(state: Arc<AppState>) -> Router {
    let cors = cors_layer(&state.config.cors);
    Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/ratings", post(post_rating))
        .route("/ratings", get(export_ratings))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such route") })
        .layer(cors)
        .with_state(state)
}

fn cors_layer(origins: &CorsOrigins) -> CorsLayer {
    let allow = match origins {
        CorsOrigins::Any => AllowOrigin::any(),
        CorsOrigins::List(list) => AllowOrigin::list(list.iter().filter_map(|o| HeaderValue::from_str(o).ok())),
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE])
}

async fn health(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({
        "status": if s.is_ready() { "ok" } else { "not_ready" },
        "epsilon": s.config.epsilon,
        "k": s.default_k(),
        "sessions": s.session_count(),
        "checkpoints": s.checkpoints(),
    }))
}

#[derive(Debug, Default, Deserialize)]
struct CreateRequest {
    epsilon: Option<f64>,
    k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Created {
    id: String,
    epsilon: f64,
    k: usize,
}

async fn create_session(State(s): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let session = s.create_session(req.epsilon, req.k).await?;
    tracing::info!(id = %session.id, "session created");
    Ok((
        StatusCode::CREATED,
        Json(Created {
            id: session.id,
            epsilon: session.epsilon,
            k: session.k,
        }),
    ))
}

async fn get_session(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let session = s.lock(&id).await?;
    Ok(Json(session.transcript(s.config.include_candidates)))
}

async fn delete_session(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let mut session = s.lock(&id).await?;
    s.close(&mut session, CloseReason::Deleted).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct MessageRequest {
    text: String,
}

async fn post_message(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Reply>, ApiError> {
    let models = s.models()?;
    let req: MessageRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::unprocessable("empty_text", "message text is empty"));
    }
    let mut session = s.try_lock(&id).await?;
    let started = Instant::now();

    let (ctx, opts, text) = (
        session.ctx.clone(),
        TurnOptions::new(session.epsilon, session.k),
        req.text,
    );
    let input = text.clone();
    let outcome = tokio::task::spawn_blocking(move || chat_turn(&models, &ctx, &input, opts))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let record = TurnRecord::from_outcome(session.turns.len(), now_ms(), text, &outcome)
        .ok_or_else(|| ApiError::internal("turn produced no switch decision"))?;

    s.log()
        .append(
            &id,
            &Event::Turn {
                record: record.clone(),
                context: outcome.context.clone(),
            },
        )
        .await
        .map_err(ApiError::internal)?;
    session.ctx = outcome.context;
    session.last_active_ms = record.at_ms;
    session.turns.push(record.clone());
    tracing::info!(id = %id, turn = record.index, switched = record.reply.switched, beta = record.reply.beta, "turn");

    if let Some(rest) = s.config.min_turn_duration.checked_sub(started.elapsed()) {
        tokio::time::sleep(rest).await;
    }
    Ok(Json(record.view(s.config.include_candidates).reply))
}

#[derive(Debug, Deserialize)]
struct RatingRequest {
    coherence: i64,
    informativeness: i64,
    engagingness: i64,
    humanness: i64,
}

async fn post_rating(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: RatingRequest = parse_body(&body)?;
    let mut session = s.lock(&id).await?;
    if session.rating.is_some() {
        return Err(ApiError::conflict(
            "duplicate_rating",
            format!("session {id} is already rated"),
        ));
    }
    let rating = RatingRecord::new(
        id.clone(),
        [req.coherence, req.informativeness, req.engagingness, req.humanness],
    )
    .map_err(|e| match e {
        EvalError::RatingOutOfRange { .. } => ApiError::unprocessable("rating_out_of_range", e.to_string()),
        other => ApiError::internal(other),
    })?;
    let at_ms = now_ms();
    s.log()
        .append(
            &id,
            &Event::Rated {
                at_ms,
                rating: rating.clone(),
            },
        )
        .await
        .map_err(ApiError::internal)?;
    session.rating = Some(rating.clone());
    session.last_active_ms = at_ms;
    Ok((StatusCode::CREATED, Json(rating)))
}

/// Every stored rating as the ratings CSV.
async fn export_ratings(State(s): State<Arc<AppState>>) -> Result<impl IntoResponse, ApiError> {
    let log = s.log().clone();
    let ratings = tokio::task::spawn_blocking(move || log.ratings())
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let mut csv = Vec::new();
    write_ratings_csv(&ratings, &mut csv).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv))
}
