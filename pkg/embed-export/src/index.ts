export { makeBox, normalizeYaw } from "./box.js";
export type { Box7 } from "./box.js";
export { l2Normalize, serializeCache, writeCache } from "./cache.js";
export type { EmbeddingCache } from "./cache.js";
export { parseClassList, readClassList } from "./classList.js";
export {
  CONTRACT_BOXES,
  CONTRACT_CLASSES,
  renderContractFixture,
} from "./contract.js";
export { STUB_MODEL_ID, StubEncoder, resolveEncoder } from "./encoder.js";
export type { PromptEncoder } from "./encoder.js";
export { ConfigError, DataError } from "./errors.js";
export { exportCache } from "./export.js";
export type { ExportRequest, ExportResult } from "./export.js";
export { format2 } from "./format.js";
export { SIMPLE_FORMAT_ID, SPATIAL_FORMAT_ID, renderPrompt } from "./prompts.js";
export type { PromptKind } from "./prompts.js";
