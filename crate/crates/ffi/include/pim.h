/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PIM_H
#define PIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on incompatible changes to this interface.
 */
#define PIM_ABI_VERSION 1

typedef enum PimStatus {
  PIM_STATUS_OK = 0,
  PIM_STATUS_NULL_ARGUMENT = 1,
  PIM_STATUS_INVALID_UTF8 = 2,
  /**
   * Input that does not parse as an operator or project.
   */
  PIM_STATUS_MALFORMED = 3,
  /**
   * A referenced entity does not exist.
   */
  PIM_STATUS_NOT_FOUND = 4,
  /**
   * The operator's preconditions do not hold; nothing changed.
   */
  PIM_STATUS_REJECTED = 5,
  PIM_STATUS_NOTHING_TO_UNDO = 6,
  PIM_STATUS_IO = 7,
  /**
   * A panic was caught at the boundary. The session should be discarded.
   */
  PIM_STATUS_INTERNAL = 8,
} PimStatus;

/**
 * Opaque session handle.
 */
typedef struct PimSession PimSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t pim_abi_version(void);

/**
 * Static name of a status code.
 */
const char *pim_status_name(enum PimStatus status);

/**
 * Message of the most recent failure on this thread; empty before any.
 * Valid until the next failing call from the same thread.
 */
const char *pim_last_error(void);

/**
 * New empty in-memory session.
 */
struct PimSession *pim_session_new(void);

/**
 * Opens a project directory into `*out`. Load warnings are not reported.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` a valid pointer.
 */
enum PimStatus pim_session_open(const char *dir, struct PimSession **out);

/**
 * Releases a session. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void pim_session_free(struct PimSession *s);

/**
 * Writes the project (state, journal, images) into `dir`.
 *
 * # Safety
 * `s` must be a live session and `dir` a nul-terminated string.
 */
enum PimStatus pim_session_save(struct PimSession *s, const char *dir);

/**
 * Applies one operator given as JSON (a bare operator or a journal record).
 * On success `*out_seq`, when not null, receives the journal sequence number.
 *
 * # Safety
 * `s` must be a live session, `op_json` a nul-terminated string and
 * `out_seq` null or valid.
 */
enum PimStatus pim_session_apply_json(struct PimSession *s, const char *op_json, uint64_t *out_seq);

/**
 * Reverts the last journal record.
 *
 * # Safety
 * `s` must be a live session.
 */
enum PimStatus pim_session_undo(struct PimSession *s);

/**
 * Number of journal records; 0 for a null session.
 *
 * # Safety
 * `s` must be null or a live session.
 */
uint64_t pim_session_journal_len(const struct PimSession *s);

/**
 * Number of live vertices; 0 for a null session.
 *
 * # Safety
 * `s` must be null or a live session.
 */
uint64_t pim_session_vertex_count(const struct PimSession *s);

/**
 * Writes the position of vertex `id` into `out[0..3]`.
 *
 * # Safety
 * `s` must be a live session and `out` point to three doubles.
 */
enum PimStatus pim_session_vertex_position(const struct PimSession *s, uint32_t id, double *out);

/**
 * Full model and derived state as JSON; identical strings mean identical state.
 *
 * # Safety
 * `s` must be a live session and `out` a valid pointer.
 */
enum PimStatus pim_session_state_json(const struct PimSession *s, char **out);

/**
 * Hex SHA-256 of the state JSON.
 *
 * # Safety
 * `s` must be a live session and `out` a valid pointer.
 */
enum PimStatus pim_session_state_digest(const struct PimSession *s, char **out);

/**
 * Solve report, calibration report and degrees-of-freedom diagnosis as JSON.
 *
 * # Safety
 * `s` must be a live session and `out` a valid pointer.
 */
enum PimStatus pim_session_report_json(const struct PimSession *s, char **out);

/**
 * Replays the journal from scratch and sets `*out_identical` to whether
 * the result is bit-identical to the current state.
 *
 * # Safety
 * `s` must be a live session and `out_identical` a valid pointer.
 */
enum PimStatus pim_session_verify_replay(const struct PimSession *s, bool *out_identical);

/**
 * Writes `mesh.obj` (and, when texturing succeeds, `mesh.mtl` and
 * `atlas.png`) into `dir`.
 *
 * # Safety
 * `s` must be a live session and `dir` a nul-terminated string.
 */
enum PimStatus pim_session_export_obj(struct PimSession *s, const char *dir);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `p` must come from this library and not be used afterwards.
 */
void pim_string_free(char *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIM_H */
