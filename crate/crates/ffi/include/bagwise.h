#ifndef BAGWISE_H
#define BAGWISE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BwStatus {
  BW_STATUS_OK = 0,
  BW_STATUS_NULL_POINTER = 1,
  BW_STATUS_INVALID_UTF8 = 2,
  BW_STATUS_PARSE = 3,
  BW_STATUS_INVALID_ARGUMENT = 4,
  BW_STATUS_OUT_OF_RANGE = 5,
  BW_STATUS_EPISODE = 6,
  BW_STATUS_BUFFER_TOO_SMALL = 7,
  BW_STATUS_PANIC = 8,
} BwStatus;

typedef enum BwSolveResult {
  BW_SOLVE_RESULT_SAT = 0,
  BW_SOLVE_RESULT_UNSAT = 1,
  BW_SOLVE_RESULT_UNKNOWN = 2,
} BwSolveResult;

typedef enum BwMethod {
  // Exact for small graphs, min-fill otherwise.
  BW_METHOD_AUTO = 0,
  BW_METHOD_MIN_FILL = 1,
  BW_METHOD_MIN_DEGREE = 2,
  BW_METHOD_EXACT = 3,
} BwMethod;

typedef enum BwMode {
  BW_MODE_FULL = 0,
  BW_MODE_DECOMPOSED = 1,
} BwMode;

typedef struct BwDecomposition BwDecomposition;

typedef struct BwEpisode BwEpisode;

// A parsed CNF formula with its constraint instance and primal graph.
typedef struct BwFormula BwFormula;

typedef struct BwTask BwTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *bw_last_error(void);

// Library version as a static nul-terminated string.
const char *bw_version(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void bw_string_free(char *s);

// Parses DIMACS CNF text.
//
// # Safety
// `dimacs` must be a nul-terminated string; `out` must be valid for a write.
enum BwStatus bw_formula_parse(const char *dimacs, struct BwFormula **out);

// # Safety
// `f` must be null or a handle from [`bw_formula_parse`], not yet freed.
void bw_formula_free(struct BwFormula *f);

// # Safety
// `f` must be a live formula handle; `out` must be valid for a write.
enum BwStatus bw_formula_num_variables(const struct BwFormula *f, uint32_t *out);

// # Safety
// `f` must be a live formula handle; `out` must be valid for a write.
enum BwStatus bw_formula_num_clauses(const struct BwFormula *f, size_t *out);

// Solves the formula. `values` receives one entry per variable, in
// variable order: 1 true, 0 false, -1 when no model was found.
//
// # Safety
// `f` must be a live formula handle; `values` must be valid for `len`
// writes; `result` must be valid for a write.
enum BwStatus bw_solve(const struct BwFormula *f,
                       uint64_t node_budget,
                       int8_t *values,
                       size_t len,
                       enum BwSolveResult *result);

// Tree decomposition of the formula's primal graph.
//
// # Safety
// `f` must be a live formula handle; `out` must be valid for a write.
enum BwStatus bw_decompose(const struct BwFormula *f,
                           enum BwMethod method,
                           struct BwDecomposition **out);

// # Safety
// `d` must be null or a handle from [`bw_decompose`], not yet freed.
void bw_decomposition_free(struct BwDecomposition *d);

// Width (largest bag size minus one; -1 when there are no bags).
//
// # Safety
// `d` must be a live decomposition handle; `out` must be valid for a write.
enum BwStatus bw_decomposition_width(const struct BwDecomposition *d, int64_t *out);

// # Safety
// `d` must be a live decomposition handle; `out` must be valid for a write.
enum BwStatus bw_decomposition_num_bags(const struct BwDecomposition *d, size_t *out);

// Copies the variables of bag `bag` into `buf` in increasing order and
// stores the bag size in `size`. With a null or short `buf`, only `size`
// is written and [`BwStatus::BufferTooSmall`] is returned.
//
// # Safety
// `d` must be a live decomposition handle; `buf` must be null or valid for
// `cap` writes; `size` must be valid for a write.
enum BwStatus bw_decomposition_bag(const struct BwDecomposition *d,
                                   size_t bag,
                                   uint32_t *buf,
                                   size_t cap,
                                   size_t *size);

// PACE `.td` text of the decomposition; free with [`bw_string_free`].
//
// # Safety
// `d` must be a live decomposition handle; `out` must be valid for a write.
enum BwStatus bw_decomposition_to_pace(const struct BwDecomposition *d, char **out);

// Builds a task from a SAT task bundle in JSON (`id`, `cnf`, `story`,
// `mapping`).
//
// # Safety
// `json` must be a nul-terminated string; `out` must be valid for a write.
enum BwStatus bw_task_from_json(const char *json, enum BwMethod method, struct BwTask **out);

// # Safety
// `t` must be null or a handle from [`bw_task_from_json`], not yet freed.
void bw_task_free(struct BwTask *t);

// Runs one episode with the scripted agent (`flip_probability` 0) or the
// noisy agent seeded with `seed`. `max_rounds` 0 uses the default budget.
//
// # Safety
// `t` must be a live task handle; `out` must be valid for a write.
enum BwStatus bw_run_episode(const struct BwTask *t,
                             enum BwMode mode,
                             double flip_probability,
                             uint64_t seed,
                             size_t max_rounds,
                             struct BwEpisode **out);

// # Safety
// `e` must be null or a handle from [`bw_run_episode`], not yet freed.
void bw_episode_free(struct BwEpisode *e);

// # Safety
// `e` must be a live episode handle; `out` must be valid for a write.
enum BwStatus bw_episode_solved(const struct BwEpisode *e, bool *out);

// # Safety
// `e` must be a live episode handle; `out` must be valid for a write.
enum BwStatus bw_episode_rounds(const struct BwEpisode *e, size_t *out);

// JSON-lines transcript of the episode; free with [`bw_string_free`].
//
// # Safety
// `e` must be a live episode handle; `out` must be valid for a write.
enum BwStatus bw_episode_transcript(const struct BwEpisode *e, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAGWISE_H */
