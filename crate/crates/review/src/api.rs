//! JSON API under `/api/v1`.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};

use hapi_core::claims::RiskLabel;

use crate::service::{CaseStatus, DecisionInput, FieldError, ReviewService, ServiceError};

pub const PREFIX: &str = "/api/v1";

pub fn router(service: Arc<ReviewService>) -> Router {
    let api = Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{patient_id}", get(get_case))
        .route("/cases/{patient_id}/decision", post(post_decision))
        .route("/patients/{patient_id}/timeline", get(get_timeline))
        .route("/patients/{patient_id}/evidence", get(get_evidence))
        .route("/clock", get(get_clock))
        .route("/clock/advance", post(advance_clock))
        .with_state(service);
    Router::new().nest(PREFIX, api).fallback(not_found)
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn validation(fields: Vec<FieldError>) -> Self {
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        ApiError {
            fields: fields.clone(),
            ..ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation_failed",
                format!("invalid fields: {}", names.join(", ")),
            )
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let msg = e.to_string();
        match e {
            ServiceError::PatientNotFound(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "patient_not_found", msg)
            }
            ServiceError::CaseNotFound(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "case_not_found", msg)
            }
            ServiceError::DuplicateDecision(_) => {
                ApiError::new(StatusCode::CONFLICT, "duplicate_decision", msg)
            }
            ServiceError::Validation(fields) => ApiError::validation(fields),
            ServiceError::Pipeline(_) | ServiceError::Store(_) | ServiceError::Replay(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "route_not_found", "no such endpoint")
}

fn field(name: &str, problem: impl Into<String>) -> FieldError {
    FieldError {
        field: name.to_string(),
        problem: problem.into(),
    }
}

async fn list_cases(
    State(svc): State<Arc<ReviewService>>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult<crate::service::CasePage> {
    let mut errors = Vec::new();
    let status = match q.get("status").map(String::as_str) {
        None | Some("all") => None,
        Some(s) => match s.parse::<CaseStatus>() {
            Ok(s) => Some(s),
            Err(_) => {
                errors.push(field("status", "must be pending, reviewed or all"));
                None
            }
        },
    };
    let mut number = |name: &str, default: usize| match q.get(name) {
        None => default,
        Some(v) => v.parse().unwrap_or_else(|_| {
            errors.push(field(name, "must be a positive integer"));
            default
        }),
    };
    let page = number("page", 1);
    let page_size = number("page_size", 20);
    for k in q.keys() {
        if !["status", "page", "page_size"].contains(&k.as_str()) {
            errors.push(field(k, "unknown parameter"));
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    Ok(Json(svc.list_cases(status, page, page_size)?))
}

async fn get_case(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
) -> ApiResult<crate::service::ReviewCase> {
    Ok(Json(svc.get_case(&id)?))
}

async fn get_timeline(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
) -> ApiResult<crate::service::Timeline> {
    Ok(Json(svc.get_timeline(&id)?))
}

async fn get_evidence(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
) -> ApiResult<Value> {
    let (risk, evidence) = svc.get_evidence(&id)?;
    Ok(Json(
        json!({ "patient_id": id, "risk": risk, "evidence": evidence }),
    ))
}

async fn get_clock(
    State(svc): State<Arc<ReviewService>>,
) -> ApiResult<crate::service::SimulationClock> {
    Ok(Json(svc.clock()))
}

fn parse_object(body: &Bytes) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::validation(vec![field(
            "body",
            "must be a JSON object",
        )])),
        Err(e) => Err(ApiError::validation(vec![field(
            "body",
            format!("not valid JSON: {e}"),
        )])),
    }
}

/// Every problem in a decision body, or the parsed decision.
pub fn validate_decision(
    body: &serde_json::Map<String, Value>,
) -> Result<DecisionInput, Vec<FieldError>> {
    let mut errors = Vec::new();
    let call = match body.get("call") {
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => {
            errors.push(field("call", "must be a boolean"));
            None
        }
        None => {
            errors.push(field("call", "required"));
            None
        }
    };
    let label = match body.get("predicted_complication") {
        Some(Value::String(s)) => match RiskLabel::ALL.iter().find(|l| l.as_str() == s) {
            Some(l) => Some(*l),
            None => {
                errors.push(field(
                    "predicted_complication",
                    "must be one of none, ght, gdb",
                ));
                None
            }
        },
        Some(_) => {
            errors.push(field("predicted_complication", "must be a string"));
            None
        }
        None => {
            errors.push(field("predicted_complication", "required"));
            None
        }
    };
    let note = match body.get("note") {
        None | Some(Value::Null) => Some(String::new()),
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            errors.push(field("note", "must be a string"));
            None
        }
    };
    for k in body.keys() {
        if !["call", "predicted_complication", "note"].contains(&k.as_str()) {
            errors.push(field(k, "unknown field"));
        }
    }
    match (call, label, note) {
        (Some(call), Some(predicted_complication), Some(note)) if errors.is_empty() => {
            Ok(DecisionInput {
                call,
                predicted_complication,
                note,
            })
        }
        _ => Err(errors),
    }
}

async fn post_decision(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<crate::service::NurseDecision>), ApiError> {
    let input = validate_decision(&parse_object(&body)?).map_err(ApiError::validation)?;
    let d = tokio::task::spawn_blocking(move || svc.post_decision(&id, input))
        .await
        .map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        })??;
    Ok((StatusCode::CREATED, Json(d)))
}

async fn advance_clock(
    State(svc): State<Arc<ReviewService>>,
    body: Bytes,
) -> ApiResult<crate::service::ClockAdvance> {
    let obj = parse_object(&body)?;
    let mut errors = Vec::new();
    let weeks = match obj.get("weeks") {
        Some(v) => match v.as_i64() {
            Some(w) if w >= 0 => Some(w),
            _ => {
                errors.push(field("weeks", "must be a non-negative integer"));
                None
            }
        },
        None => {
            errors.push(field("weeks", "required"));
            None
        }
    };
    for k in obj.keys().filter(|k| k.as_str() != "weeks") {
        errors.push(field(k, "unknown field"));
    }
    let Some(weeks) = weeks.filter(|_| errors.is_empty()) else {
        return Err(ApiError::validation(errors));
    };
    let out = tokio::task::spawn_blocking(move || svc.advance_clock(weeks))
        .await
        .map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        })??;
    Ok(Json(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(v: Value) -> serde_json::Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn decision_validation_lists_every_bad_field() {
        let errs = validate_decision(&obj(
            json!({"call": "yes", "predicted_complication": "flu", "extra": 1}),
        ))
        .unwrap_err();
        let names: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(names, ["call", "predicted_complication", "extra"]);
        let errs = validate_decision(&obj(json!({}))).unwrap_err();
        assert_eq!(errs.len(), 2);
    }

    #[test]
    fn note_defaults_to_empty() {
        let d = validate_decision(&obj(
            json!({"call": false, "predicted_complication": "ght"}),
        ))
        .unwrap();
        assert_eq!(d.note, "");
        assert_eq!(d.predicted_complication, RiskLabel::Ght);
    }
}
