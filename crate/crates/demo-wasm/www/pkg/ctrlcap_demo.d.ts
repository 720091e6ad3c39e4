/* tslint:disable */
/* eslint-disable */

/**
 * IoU of a box with every object of the scene, as a JSON array.
 */
export function box_overlaps(scene_id: number, seed: number, x: number, y: number, w: number, h: number): string;

export function canvas_size(): number;

/**
 * Objects of a scene with one caption per template (ineligible templates
 * fall back to the plain one), as JSON.
 */
export function describe_scene(scene_id: number, seed: number): string;

/**
 * The region view the encoder sees for a box: the crop resized to the
 * encoder resolution, RGBA.
 */
export function region_view(scene_id: number, seed: number, x: number, y: number, w: number, h: number): Uint8Array;

/**
 * RGBA pixels of a rendered scene.
 */
export function render_scene(scene_id: number, seed: number): Uint8Array;

/**
 * METEOR against newline-separated references, the caption's template
 * and whether every control word appears in it, as JSON.
 */
export function score_caption(candidate: string, references: string, controls: string): string;

export function view_size(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly box_overlaps: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly canvas_size: () => number;
    readonly describe_scene: (a: number, b: number) => [number, number, number, number];
    readonly region_view: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly render_scene: (a: number, b: number) => [number, number, number, number];
    readonly score_caption: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly view_size: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
