#ifndef DELTASWITCH_H
#define DELTASWITCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_IO = 3,
  DS_STATUS_FORMAT = 4,
  DS_STATUS_DIGEST_MISMATCH = 5,
  DS_STATUS_UNKNOWN_EXPERT = 6,
  DS_STATUS_BUDGET_EXCEEDED = 7,
  DS_STATUS_BUFFER_TOO_SMALL = 8,
  DS_STATUS_PANIC = 9,
  DS_STATUS_OTHER = 10,
} DsStatus;

typedef struct DsArtifact DsArtifact;

typedef struct DsModel DsModel;

typedef struct DsRegistry DsRegistry;

typedef struct DsRouter DsRouter;

typedef struct DsRegistryStats {
  size_t current_bytes;
  size_t peak_bytes;
  size_t resident_count;
  size_t pinned_count;
  uint64_t load_count;
  uint64_t evict_count;
} DsRegistryStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf`. Never
// replaces the stored message, so it can be retried with a larger buffer.
//
// # Safety
// `buf` must be valid for `cap` bytes; `out_len` may be null.
enum DsStatus ds_last_error(char *buf, size_t cap, size_t *out_len);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DsStatus ds_model_load(const char *path, struct DsModel **out);

// # Safety
// `model` must come from [`ds_model_load`] and not be used afterwards.
void ds_model_free(struct DsModel *model);

// Hex SHA-256 of the model's weights (64 characters).
//
// # Safety
// `model` must be a live handle and `buf` valid for `cap` bytes.
enum DsStatus ds_model_digest(const struct DsModel *model, char *buf, size_t cap, size_t *out_len);

// # Safety
// `model` must be a live handle.
enum DsStatus ds_model_vocab(const struct DsModel *model, size_t *out);

// Greedy decode of `max_new` tokens after `prompt`; `out` receives prompt
// plus continuation. `artifact` may be null to run the bare base.
//
// # Safety
// Handles must be live; `prompt` valid for `prompt_len` and `out` for `cap`
// elements.
enum DsStatus ds_model_greedy_decode(const struct DsModel *model,
                                     const struct DsArtifact *artifact,
                                     const uint32_t *prompt,
                                     size_t prompt_len,
                                     size_t max_new,
                                     uint32_t *out,
                                     size_t cap,
                                     size_t *out_len);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DsStatus ds_artifact_load(const char *path, struct DsArtifact **out);

// # Safety
// `artifact` must come from [`ds_artifact_load`] and not be used afterwards.
void ds_artifact_free(struct DsArtifact *artifact);

// Exact serialized size in bytes.
//
// # Safety
// `artifact` must be a live handle.
enum DsStatus ds_artifact_size_bytes(const struct DsArtifact *artifact, size_t *out);

// # Safety
// `artifact` must be a live handle and `buf` valid for `cap` bytes.
enum DsStatus ds_artifact_domain(const struct DsArtifact *artifact,
                                 char *buf,
                                 size_t cap,
                                 size_t *out_len);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DsStatus ds_router_load(const char *path, struct DsRouter **out);

// # Safety
// `router` must come from [`ds_router_load`] and not be used afterwards.
void ds_router_free(struct DsRouter *router);

// Classifies `query`; writes the domain name, its label id and the
// (ordinal) confidence. `out_id` and `out_confidence` may be null.
//
// # Safety
// `router` must be live, `query` NUL-terminated and `buf` valid for `cap`.
enum DsStatus ds_router_classify(const struct DsRouter *router,
                                 const char *query,
                                 char *buf,
                                 size_t cap,
                                 size_t *out_len,
                                 uint32_t *out_id,
                                 double *out_confidence);

// `m·Ψ / (Ψ + m·Ψ̃ + Φ)`.
//
// # Safety
// `out` must be a valid pointer.
enum DsStatus ds_compression_ratio(double psi,
                                   double psi_tilde,
                                   double phi,
                                   uint64_t m,
                                   double *out);

// The multiple-choice routing prompt over the standard domain options.
//
// # Safety
// `query` must be NUL-terminated and `buf` valid for `cap` bytes.
enum DsStatus ds_render_prompt(const char *query, char *buf, size_t cap, size_t *out_len);

// Opens (or creates) a registry directory bound to `model`'s digest.
//
// # Safety
// `root` must be NUL-terminated, `model` live and `out` valid.
enum DsStatus ds_registry_open(const char *root,
                               size_t budget_bytes,
                               const struct DsModel *model,
                               struct DsRegistry **out);

// # Safety
// `registry` must come from [`ds_registry_open`] and not be used afterwards.
void ds_registry_free(struct DsRegistry *registry);

// # Safety
// `registry` must be live; `id` and `path` NUL-terminated.
enum DsStatus ds_registry_register(const struct DsRegistry *registry,
                                   const char *id,
                                   const char *path);

// Pins `id`, loading it and evicting least-recently-used experts as needed.
// Fails with `BudgetExceeded` when pinned experts leave no room.
//
// # Safety
// `registry` must be live and `id` NUL-terminated.
enum DsStatus ds_registry_acquire(const struct DsRegistry *registry, const char *id);

// # Safety
// `registry` must be live and `id` NUL-terminated.
enum DsStatus ds_registry_release(const struct DsRegistry *registry, const char *id);

// # Safety
// `registry` must be live and `out` valid.
enum DsStatus ds_registry_stats(const struct DsRegistry *registry, struct DsRegistryStats *out);

// Acquires `id`, greedy-decodes with it and releases it again.
//
// # Safety
// Handles must be live, `id` NUL-terminated, `prompt` valid for
// `prompt_len` and `out` for `cap` elements.
enum DsStatus ds_registry_decode(const struct DsRegistry *registry,
                                 const struct DsModel *model,
                                 const char *id,
                                 const uint32_t *prompt,
                                 size_t prompt_len,
                                 size_t max_new,
                                 uint32_t *out,
                                 size_t cap,
                                 size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTASWITCH_H */
